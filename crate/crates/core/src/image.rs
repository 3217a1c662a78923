//! Square axial slice images and display windowing.

use crate::error::{Error, Result};

/// Square image of an axial slice at height `z`, centered on the rotation
/// axis. Row 0 is the +y edge; column 0 is the −x edge.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceImage {
    size: usize,
    fov_mm: f64,
    z: f64,
    pixels: Vec<f64>,
}

impl SliceImage {
    pub fn zeros(size: usize, fov_mm: f64, z: f64) -> Self {
        Self {
            size,
            fov_mm,
            z,
            pixels: vec![0.0; size * size],
        }
    }

    pub fn from_pixels(size: usize, fov_mm: f64, z: f64, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != size * size {
            return Err(Error::Contract(format!(
                "{} pixels do not form a {size}x{size} image",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::Contract("slice image has non-finite pixels".into()));
        }
        Ok(Self {
            size,
            fov_mm,
            z,
            pixels,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn fov_mm(&self) -> f64 {
        self.fov_mm
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn pixel_spacing(&self) -> f64 {
        self.fov_mm / self.size as f64
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.size + col]
    }

    /// World (x, y) of a pixel center, mm.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        pixel_center(self.size, self.fov_mm, row, col)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.pixels
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| (lo.min(p), hi.max(p)))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> SliceImage {
        SliceImage {
            pixels: self.pixels.iter().map(|p| f(*p)).collect(),
            ..self.clone()
        }
    }

    /// Bilinear resampling to `size` × `size` over the same field of view.
    pub fn resample(&self, size: usize) -> SliceImage {
        if size == self.size {
            return self.clone();
        }
        let scale = self.size as f64 / size as f64;
        let last = (self.size - 1) as f64;
        let mut out = Vec::with_capacity(size * size);
        for r in 0..size {
            let y = ((r as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let (y0, fy) = (y.floor() as usize, y - y.floor());
            let y1 = (y0 + 1).min(self.size - 1);
            for c in 0..size {
                let x = ((c as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
                let (x0, fx) = (x.floor() as usize, x - x.floor());
                let x1 = (x0 + 1).min(self.size - 1);
                let top = self.get(y0, x0) * (1.0 - fx) + self.get(y0, x1) * fx;
                let bottom = self.get(y1, x0) * (1.0 - fx) + self.get(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
        SliceImage {
            size,
            fov_mm: self.fov_mm,
            z: self.z,
            pixels: out,
        }
    }
}

pub(crate) fn pixel_center(size: usize, fov_mm: f64, row: usize, col: usize) -> (f64, f64) {
    let spacing = fov_mm / size as f64;
    let half = fov_mm / 2.0;
    (
        (col as f64 + 0.5) * spacing - half,
        half - (row as f64 + 0.5) * spacing,
    )
}

/// Display units per unit of phantom attenuation. With this map water
/// (attenuation 1.0) reads 1000, air reads 0.
pub const DISPLAY_UNITS_PER_ATTENUATION: f64 = 1000.0;

/// Affine gray-level window in display units.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisplayWindow {
    pub lo: f64,
    pub hi: f64,
}

impl Default for DisplayWindow {
    /// The [500, 2000] window used for head previews.
    fn default() -> Self {
        Self {
            lo: 500.0,
            hi: 2000.0,
        }
    }
}

impl DisplayWindow {
    /// Maps attenuation values to [0, 1], clamping outside the window.
    pub fn apply(&self, img: &SliceImage) -> SliceImage {
        let (lo, hi) = (self.lo, self.hi);
        img.map(|v| ((v * DISPLAY_UNITS_PER_ATTENUATION - lo) / (hi - lo)).clamp(0.0, 1.0))
    }
}

/// Affine map of raw pixel values to 8-bit gray levels, clamped to
/// [0, 255]. Exact halves round to the even neighbor.
pub fn normalize_for_display(img: &SliceImage, window_lo: f64, window_hi: f64) -> Result<Vec<u8>> {
    if !(window_hi > window_lo) {
        return Err(Error::Contract("display window must have hi > lo".into()));
    }
    Ok(img
        .pixels()
        .iter()
        .map(|v| {
            let scaled = (v - window_lo) / (window_hi - window_lo) * 255.0;
            scaled.clamp(0.0, 255.0).round_ties_even() as u8
        })
        .collect())
}
