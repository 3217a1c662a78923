//! Motion-aware FDK reconstruction of the central (z = 0) slice.
//!
//! Projections are cosine weighted and ramp filtered row by row, then
//! backprojected through `P_i · M_i` for each view. Filtering is expressed
//! on the virtual detector through the isocenter, so reconstructed values
//! are in the phantom's attenuation units.
//!
//! Each view is scaled by half the angular step. Under motion the source
//! azimuths seen by the patient are no longer evenly spaced, so every view
//! is additionally weighted by the local spacing of those azimuths relative
//! to the nominal step. Without motion all weights are exactly one.

use nalgebra::Matrix3;
use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ProjectionMatrix, ScanGeometry};
pub use crate::image::{normalize_for_display, SliceImage};
use crate::motion::MotionTrajectory;
use crate::phantom::ProjectionStack;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// Pure Ram-Lak ramp.
    #[default]
    RampSharp,
    /// Ramp apodized with a Hann window.
    RampHann,
}

/// Slice grid, field of view and kernel shared by every reconstruction of a
/// run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconSettings {
    pub grid_size: usize,
    pub fov_mm: f64,
    pub kernel: KernelKind,
}

impl Default for ReconSettings {
    fn default() -> Self {
        Self {
            grid_size: 128,
            fov_mm: 160.0,
            kernel: KernelKind::RampSharp,
        }
    }
}

impl ReconSettings {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 8 {
            return Err(Error::Config("reconstruction grid must be at least 8x8".into()));
        }
        if !(self.fov_mm.is_finite() && self.fov_mm > 0.0) {
            return Err(Error::Config("reconstruction fov must be positive".into()));
        }
        Ok(())
    }

    pub fn backprojector(&self, stack: &ProjectionStack, matrices: &[ProjectionMatrix]) -> Result<Backprojector> {
        self.validate()?;
        let kernel = FilterKernel::for_detector(self.kernel, stack.geometry().detector_cols);
        Backprojector::new(stack, matrices, &kernel, self.grid_size, self.fov_mm)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterKernel {
    pub kind: KernelKind,
    /// Zero-padded row length; a power of two.
    pub length: usize,
}

impl FilterKernel {
    /// Smallest valid kernel for rows of `detector_cols` pixels.
    pub fn for_detector(kind: KernelKind, detector_cols: usize) -> Self {
        Self {
            kind,
            length: (2 * detector_cols).next_power_of_two(),
        }
    }

    fn validate(&self, detector_cols: usize) -> Result<()> {
        if !self.length.is_power_of_two() || self.length < 2 * detector_cols {
            return Err(Error::Config(format!(
                "filter length {} must be a power of two >= {}",
                self.length,
                2 * detector_cols
            )));
        }
        Ok(())
    }

    /// Ram-Lak tap for integer offset `n` (unit sampling).
    pub fn ram_lak_tap(n: i64) -> f64 {
        if n == 0 {
            0.25
        } else if n % 2 == 0 {
            0.0
        } else {
            let d = std::f64::consts::PI * n as f64;
            -1.0 / (d * d)
        }
    }

    /// Frequency response of the wrapped, scaled taps.
    fn spectrum(&self, scale: f64) -> Vec<Complex<f64>> {
        let len = self.length;
        let half = (len / 2) as i64;
        let mut taps: Vec<Complex<f64>> = (0..len as i64)
            .map(|k| {
                let n = if k < half { k } else { k - len as i64 };
                Complex::new(Self::ram_lak_tap(n) * scale, 0.0)
            })
            .collect();
        FftPlanner::new().plan_fft_forward(len).process(&mut taps);
        if self.kind == KernelKind::RampHann {
            for (k, h) in taps.iter_mut().enumerate() {
                let w = 0.5 * (1.0 + (std::f64::consts::TAU * k as f64 / len as f64).cos());
                *h *= w;
            }
        }
        taps
    }
}

/// FDK pre-weighting and ramp filtering of every detector row.
pub fn filter_projections(stack: &ProjectionStack, kernel: &FilterKernel) -> Result<ProjectionStack> {
    let g = stack.geometry().clone();
    kernel.validate(g.detector_cols)?;
    let (rows, cols) = (g.detector_rows, g.detector_cols);
    let (cu, cv) = g.detector_center();
    let sdd = g.source_detector_distance;
    // taps are defined on the virtual detector through the isocenter
    let iso_pitch = g.pixel_pitch_u / g.magnification();
    let spectrum = kernel.spectrum(1.0 / iso_pitch);
    let len = kernel.length;
    let fft = FftPlanner::new().plan_fft_forward(len);
    let ifft = FftPlanner::new().plan_fft_inverse(len);

    let weights: Vec<f64> = (0..rows)
        .flat_map(|r| {
            let dv = (r as f64 - cv) * g.pixel_pitch_v;
            (0..cols).map(move |c| {
                let du = (c as f64 - cu) * g.pixel_pitch_u;
                sdd / (sdd * sdd + du * du + dv * dv).sqrt()
            })
        })
        .collect();

    let mut out = ProjectionStack::zeros(g);
    out.data_mut()
        .par_chunks_mut(cols)
        .zip(stack.data().par_chunks(cols))
        .enumerate()
        .for_each_init(
            || vec![Complex::new(0.0, 0.0); len],
            |buf, (index, (dst, src))| {
                let row = index % rows;
                let w = &weights[row * cols..(row + 1) * cols];
                for (k, b) in buf.iter_mut().enumerate() {
                    *b = if k < cols {
                        Complex::new(src[k] * w[k], 0.0)
                    } else {
                        Complex::new(0.0, 0.0)
                    };
                }
                fft.process(buf);
                for (b, h) in buf.iter_mut().zip(&spectrum) {
                    *b *= h;
                }
                ifft.process(buf);
                let norm = 1.0 / len as f64;
                for (d, b) in dst.iter_mut().zip(buf.iter()) {
                    *d = b.re * norm;
                }
            },
        );
    Ok(out)
}

/// Filtered projections and geometry, ready for repeated motion-aware
/// backprojection of the central slice.
#[derive(Clone, Debug)]
pub struct Backprojector {
    filtered: ProjectionStack,
    matrices: Vec<ProjectionMatrix>,
    grid_size: usize,
    fov_mm: f64,
}

impl Backprojector {
    pub fn new(
        stack: &ProjectionStack,
        matrices: &[ProjectionMatrix],
        kernel: &FilterKernel,
        grid_size: usize,
        fov_mm: f64,
    ) -> Result<Self> {
        let filtered = filter_projections(stack, kernel)?;
        Self::from_filtered(filtered, matrices, grid_size, fov_mm)
    }

    pub fn from_filtered(
        filtered: ProjectionStack,
        matrices: &[ProjectionMatrix],
        grid_size: usize,
        fov_mm: f64,
    ) -> Result<Self> {
        if matrices.len() != filtered.geometry().n_views {
            return Err(Error::Contract(format!(
                "{} projection matrices for a stack of {} views",
                matrices.len(),
                filtered.geometry().n_views
            )));
        }
        if grid_size == 0 || !(fov_mm.is_finite() && fov_mm > 0.0) {
            return Err(Error::Config("reconstruction grid and fov must be positive".into()));
        }
        Ok(Self {
            filtered,
            matrices: matrices.to_vec(),
            grid_size,
            fov_mm,
        })
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn fov_mm(&self) -> f64 {
        self.fov_mm
    }

    pub fn n_views(&self) -> usize {
        self.matrices.len()
    }

    /// Reconstructs the central slice assuming the patient followed
    /// `motion`. Each view contributes through `P_i · M_i`; detector
    /// positions off the detector contribute zero.
    pub fn reconstruct(&self, motion: &MotionTrajectory) -> Result<SliceImage> {
        if motion.len() != self.matrices.len() {
            return Err(Error::Contract(format!(
                "motion has {} views, stack has {}",
                motion.len(),
                self.matrices.len()
            )));
        }
        let compensated: Vec<ProjectionMatrix> = self
            .matrices
            .iter()
            .zip(motion.motions())
            .map(|(p, m)| if m.is_identity() { *p } else { p.with_motion(m) })
            .collect();
        let g = self.filtered.geometry();
        let weights = angular_weights(g, &self.matrices, &compensated);
        let homographies: Vec<Matrix3<f64>> = compensated.iter().map(plane_homography).collect();
        let (rows, cols) = (g.detector_rows, g.detector_cols);
        let scale = g.angular_step().to_radians() / 2.0;
        let size = self.grid_size;
        let spacing = self.fov_mm / size as f64;
        let half = self.fov_mm / 2.0;

        let mut img = SliceImage::zeros(size, self.fov_mm, 0.0);
        img.pixels_mut()
            .par_chunks_mut(size)
            .enumerate()
            .for_each(|(row, out)| {
                let y = half - (row as f64 + 0.5) * spacing;
                let x0 = 0.5 * spacing - half;
                for (view, h) in homographies.iter().enumerate() {
                    let weight = weights[view];
                    if weight == 0.0 {
                        continue;
                    }
                    let data = self.filtered.view(view);
                    for (col, px) in out.iter_mut().enumerate() {
                        let x = x0 + col as f64 * spacing;
                        let w = h[(2, 0)] * x + h[(2, 1)] * y + h[(2, 2)];
                        let inv = 1.0 / w;
                        let u = (h[(0, 0)] * x + h[(0, 1)] * y + h[(0, 2)]) * inv;
                        let v = (h[(1, 0)] * x + h[(1, 1)] * y + h[(1, 2)]) * inv;
                        *px += bilinear(data, rows, cols, u, v) * inv * inv * weight;
                    }
                }
                for px in out.iter_mut() {
                    *px *= scale;
                }
            });
        if img.pixels().iter().any(|p| !p.is_finite()) {
            return Err(Error::Contract("reconstruction produced non-finite pixels".into()));
        }
        Ok(img)
    }
}

/// Per-view angular density weights for backprojection through
/// `compensated`. A view's effective angle is the nominal view angle plus
/// the change in azimuth of its source position, and its weight is the
/// spacing to its neighbours in units of the nominal step, never negative.
/// Full circles wrap around; open arcs use one-sided spacing at the ends.
pub fn angular_weights(
    geometry: &ScanGeometry,
    nominal: &[ProjectionMatrix],
    compensated: &[ProjectionMatrix],
) -> Vec<f64> {
    let n = nominal.len();
    let azimuth = |p: &ProjectionMatrix| {
        let s = p.source_position();
        s.y.atan2(s.x).to_degrees()
    };
    let shift: Vec<f64> = nominal
        .iter()
        .zip(compensated)
        .map(|(p, q)| {
            let d = (azimuth(q) - azimuth(p)).rem_euclid(360.0);
            if d > 180.0 {
                d - 360.0
            } else {
                d
            }
        })
        .collect();
    if n < 2 || shift.iter().all(|d| *d == 0.0) {
        return vec![1.0; n];
    }
    let step = geometry.angular_step();
    let full_circle = (geometry.angular_range() + step - 360.0).abs() < 1e-6 * step.max(1.0);
    (0..n)
        .map(|i| {
            let w = match (i, full_circle) {
                (0, false) => 1.0 + (shift[1] - shift[0]) / step,
                (i, false) if i == n - 1 => 1.0 + (shift[i] - shift[i - 1]) / step,
                _ => {
                    let prev = shift[(i + n - 1) % n];
                    let next = shift[(i + 1) % n];
                    1.0 + (next - prev) / (2.0 * step)
                }
            };
            w.max(0.0)
        })
        .collect()
}

/// Columns x, y and w of a projection matrix: maps `(x, y, 1)` on the
/// z = 0 plane to homogeneous detector coordinates.
fn plane_homography(p: &ProjectionMatrix) -> Matrix3<f64> {
    let m = p.matrix();
    Matrix3::from_fn(|r, c| m[(r, if c == 2 { 3 } else { c })])
}

#[inline]
fn bilinear(data: &[f64], rows: usize, cols: usize, u: f64, v: f64) -> f64 {
    let (umax, vmax) = ((cols - 1) as f64, (rows - 1) as f64);
    if !(u >= 0.0 && u <= umax && v >= 0.0 && v <= vmax) {
        return 0.0;
    }
    let (u0, v0) = (u.floor(), v.floor());
    let (fu, fv) = (u - u0, v - v0);
    let (c0, r0) = (u0 as usize, v0 as usize);
    let c1 = (c0 + 1).min(cols - 1);
    let r1 = (r0 + 1).min(rows - 1);
    let top = data[r0 * cols + c0] * (1.0 - fu) + data[r0 * cols + c1] * fu;
    let bottom = data[r1 * cols + c0] * (1.0 - fu) + data[r1 * cols + c1] * fu;
    top * (1.0 - fv) + bottom * fv
}

/// Filters `stack` and reconstructs the central slice under `motion`.
pub fn fbp_central_slice(
    stack: &ProjectionStack,
    matrices: &[ProjectionMatrix],
    motion: &MotionTrajectory,
    grid_size: usize,
    fov_mm: f64,
    kernel: &FilterKernel,
) -> Result<SliceImage> {
    if motion.len() != matrices.len() || matrices.len() != stack.geometry().n_views {
        return Err(Error::Contract(format!(
            "inconsistent lengths: {} views in stack, {} matrices, {} motions",
            stack.geometry().n_views,
            matrices.len(),
            motion.len()
        )));
    }
    Backprojector::new(stack, matrices, kernel, grid_size, fov_mm)?.reconstruct(motion)
}
