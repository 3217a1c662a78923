//! Analytic ellipsoid phantoms, exact line integrals and cone-beam forward
//! projection.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{ProjectionMatrix, ScanGeometry};
use crate::image::SliceImage;
use crate::motion::MotionTrajectory;

const DEFAULT_HEAD: &str = include_str!("../data/head_phantom.txt");

#[derive(Clone, Debug, PartialEq)]
pub struct Ellipsoid {
    pub center: Vector3<f64>,
    pub semi_axes: Vector3<f64>,
    /// Rotation about the z-axis, degrees.
    pub z_rotation: f64,
    pub density: f64,
}

impl Ellipsoid {
    pub fn sphere(center: Vector3<f64>, radius: f64, density: f64) -> Self {
        Self {
            center,
            semi_axes: Vector3::repeat(radius),
            z_rotation: 0.0,
            density,
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.semi_axes.iter().all(|a| a.is_finite() && *a > 0.0) {
            return Err(Error::Config("ellipsoid semi-axes must be positive".into()));
        }
        if !(self.center.iter().all(|c| c.is_finite())
            && self.z_rotation.is_finite()
            && self.density.is_finite())
        {
            return Err(Error::Config("ellipsoid parameters must be finite".into()));
        }
        Ok(())
    }

    /// Maps world coordinates into the frame where the ellipsoid is the
    /// unit sphere: `p ↦ S⁻¹ Rᵀ (p − c)`.
    fn unit_frame(&self) -> UnitFrame {
        let (s, c) = self.z_rotation.to_radians().sin_cos();
        let rt = Matrix3::new(c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0);
        let inv_axes = Matrix3::from_diagonal(&self.semi_axes.map(|a| 1.0 / a));
        UnitFrame {
            linear: inv_axes * rt,
            center: self.center,
            density: self.density,
        }
    }

    /// Largest distance from the origin reached by the ellipsoid (bound).
    fn extent(&self) -> f64 {
        self.center.norm() + self.semi_axes.max()
    }
}

struct UnitFrame {
    linear: Matrix3<f64>,
    center: Vector3<f64>,
    density: f64,
}

impl UnitFrame {
    fn chord(&self, origin: &Vector3<f64>, direction: &Vector3<f64>) -> f64 {
        let o = self.linear * (origin - self.center);
        let d = self.linear * direction;
        let a = d.dot(&d);
        let b = o.dot(&d);
        let c = o.dot(&o) - 1.0;
        let disc = b * b - a * c;
        if disc <= 0.0 {
            0.0
        } else {
            2.0 * disc.sqrt() / a
        }
    }

    fn contains(&self, p: &Vector3<f64>) -> bool {
        (self.linear * (p - self.center)).norm_squared() <= 1.0
    }
}

/// Sum of ellipsoids.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    ellipsoids: Vec<Ellipsoid>,
}

impl Phantom {
    pub fn new(ellipsoids: Vec<Ellipsoid>) -> Result<Self> {
        if ellipsoids.is_empty() {
            return Err(Error::Config("phantom needs at least one ellipsoid".into()));
        }
        for e in &ellipsoids {
            e.validate()?;
        }
        Ok(Self { ellipsoids })
    }

    /// Built-in head phantom: skull, brain and a handful of inserts.
    pub fn default_head() -> Self {
        Self::parse(DEFAULT_HEAD).expect("bundled phantom is valid")
    }

    pub fn ellipsoids(&self) -> &[Ellipsoid] {
        &self.ellipsoids
    }

    pub fn extent(&self) -> f64 {
        self.ellipsoids.iter().map(Ellipsoid::extent).fold(0.0, f64::max)
    }

    /// Checks that the phantom fits well inside the source circle.
    pub fn check_fits(&self, geometry: &ScanGeometry) -> Result<()> {
        let extent = self.extent();
        if extent >= geometry.source_axis_distance / 2.0 {
            return Err(Error::Config(format!(
                "phantom extent {extent:.1} mm exceeds half the source-axis distance"
            )));
        }
        Ok(())
    }

    /// Parses the plain-text phantom format: one ellipsoid per line with
    /// eight whitespace-separated numbers (center xyz, semi-axes xyz, z
    /// rotation in degrees, density). `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut ellipsoids = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let values = line
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Config(format!("phantom line {}: {e}", lineno + 1)))?;
            if values.len() != 8 {
                return Err(Error::Config(format!(
                    "phantom line {}: expected 8 values, found {}",
                    lineno + 1,
                    values.len()
                )));
            }
            ellipsoids.push(Ellipsoid {
                center: Vector3::new(values[0], values[1], values[2]),
                semi_axes: Vector3::new(values[3], values[4], values[5]),
                z_rotation: values[6],
                density: values[7],
            });
        }
        Self::new(ellipsoids)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(
            "# center_x center_y center_z semi_x semi_y semi_z z_rotation_deg density\n",
        );
        for e in &self.ellipsoids {
            let _ = writeln!(
                out,
                "{} {} {} {} {} {} {} {}",
                e.center.x,
                e.center.y,
                e.center.z,
                e.semi_axes.x,
                e.semi_axes.y,
                e.semi_axes.z,
                e.z_rotation,
                e.density
            );
        }
        out
    }

    /// Seeded anatomical variant: the first two ellipsoids (skull and
    /// brain) are kept, every insert is jittered in position, size,
    /// orientation and contrast. Seed 0 returns the phantom unchanged.
    pub fn variant(&self, seed: u64) -> Phantom {
        if seed == 0 {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ellipsoids = self
            .ellipsoids
            .iter()
            .enumerate()
            .map(|(k, e)| {
                if k < 2 {
                    return e.clone();
                }
                let shift = Vector3::new(rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0), 0.0);
                let stretch = Vector3::new(
                    rng.gen_range(0.8..1.2),
                    rng.gen_range(0.8..1.2),
                    rng.gen_range(0.9..1.1),
                );
                Ellipsoid {
                    center: e.center + shift,
                    semi_axes: e.semi_axes.component_mul(&stretch),
                    z_rotation: e.z_rotation + rng.gen_range(-25.0..25.0),
                    density: e.density * rng.gen_range(0.75..1.25),
                }
            })
            .collect();
        Phantom { ellipsoids }
    }

    /// Attenuation at a point.
    pub fn value_at(&self, p: &Vector3<f64>) -> f64 {
        self.ellipsoids
            .iter()
            .map(|e| e.unit_frame())
            .filter(|f| f.contains(p))
            .map(|f| f.density)
            .sum()
    }
}

/// Line integral of the phantom along the ray `origin + t·direction`,
/// `direction` a unit vector.
pub fn ray_integral(phantom: &Phantom, origin: &Vector3<f64>, direction: &Vector3<f64>) -> f64 {
    phantom
        .ellipsoids
        .iter()
        .map(|e| {
            let f = e.unit_frame();
            f.density * f.chord(origin, direction)
        })
        .sum()
}

/// Line-integral data, `n_views × rows × cols`, view-major then row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionStack {
    geometry: ScanGeometry,
    data: Vec<f64>,
}

impl ProjectionStack {
    pub fn zeros(geometry: ScanGeometry) -> Self {
        let len = geometry.n_views * geometry.detector_rows * geometry.detector_cols;
        Self {
            geometry,
            data: vec![0.0; len],
        }
    }

    pub fn from_data(geometry: ScanGeometry, data: Vec<f64>) -> Result<Self> {
        geometry.validate()?;
        let len = geometry.n_views * geometry.detector_rows * geometry.detector_cols;
        if data.len() != len {
            return Err(Error::Contract(format!(
                "stack holds {} values, geometry requires {len}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("projection stack has non-finite values".into()));
        }
        Ok(Self { geometry, data })
    }

    pub fn geometry(&self) -> &ScanGeometry {
        &self.geometry
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn view_len(&self) -> usize {
        self.geometry.detector_rows * self.geometry.detector_cols
    }

    pub fn view(&self, view: usize) -> &[f64] {
        let n = self.view_len();
        &self.data[view * n..(view + 1) * n]
    }

    pub fn row(&self, view: usize, row: usize) -> &[f64] {
        let cols = self.geometry.detector_cols;
        let start = view * self.view_len() + row * cols;
        &self.data[start..start + cols]
    }

    pub fn get(&self, view: usize, row: usize, col: usize) -> f64 {
        self.row(view, row)[col]
    }

    /// CRC-32 of the little-endian f64 payload.
    pub fn checksum(&self) -> u32 {
        let mut hasher = crc32fast::Hasher::new();
        for v in &self.data {
            hasher.update(&v.to_le_bytes());
        }
        hasher.finalize()
    }
}

/// Casts one ray per detector pixel and view through the phantom moved by
/// the per-view motion (`None` = motion free).
pub fn forward_project(
    phantom: &Phantom,
    matrices: &[ProjectionMatrix],
    geometry: &ScanGeometry,
    motion: Option<&MotionTrajectory>,
) -> Result<ProjectionStack> {
    geometry.validate()?;
    if matrices.len() != geometry.n_views {
        return Err(Error::Contract(format!(
            "{} projection matrices for {} views",
            matrices.len(),
            geometry.n_views
        )));
    }
    if let Some(m) = motion {
        if m.len() != geometry.n_views {
            return Err(Error::Contract(format!(
                "motion has {} views, geometry has {}",
                m.len(),
                geometry.n_views
            )));
        }
    }
    let frames: Vec<UnitFrame> = phantom.ellipsoids.iter().map(Ellipsoid::unit_frame).collect();
    let mut stack = ProjectionStack::zeros(geometry.clone());
    let (rows, cols) = (geometry.detector_rows, geometry.detector_cols);
    let view_len = rows * cols;
    stack
        .data
        .par_chunks_mut(view_len)
        .enumerate()
        .for_each(|(view, out)| {
            let p = &matrices[view];
            let source = p.source_position();
            let back = p.left_inverse();
            // the patient moved by M; trace the ray through M⁻¹ instead
            let (origin, inverse) = match motion.map(|m| m.get(view)) {
                Some(m) if !m.is_identity() => {
                    let inv = m.inverse();
                    (inv.rotation() * source + inv.translation(), Some(inv))
                }
                _ => (source, None),
            };
            for row in 0..rows {
                for col in 0..cols {
                    let mut dir = (back * Vector3::new(col as f64, row as f64, 1.0)).normalize();
                    if let Some(inv) = &inverse {
                        dir = inv.apply_vector(&dir);
                    }
                    out[row * cols + col] = frames
                        .iter()
                        .map(|f| f.density * f.chord(&origin, &dir))
                        .sum();
                }
            }
        });
    Ok(stack)
}

/// Point-sampled slice of the phantom at height `z`.
pub fn render_slice(phantom: &Phantom, grid_size: usize, fov_mm: f64, z: f64) -> Result<SliceImage> {
    if grid_size < 8 {
        return Err(Error::Config("render grid must be at least 8x8".into()));
    }
    if !(fov_mm.is_finite() && fov_mm > 0.0) {
        return Err(Error::Config("field of view must be positive".into()));
    }
    let frames: Vec<UnitFrame> = phantom.ellipsoids.iter().map(Ellipsoid::unit_frame).collect();
    let mut img = SliceImage::zeros(grid_size, fov_mm, z);
    img.pixels_mut()
        .par_chunks_mut(grid_size)
        .enumerate()
        .for_each(|(row, out)| {
            for (col, px) in out.iter_mut().enumerate() {
                let (x, y) = crate::image::pixel_center(grid_size, fov_mm, row, col);
                let p = Vector3::new(x, y, z);
                *px = frames.iter().filter(|f| f.contains(&p)).map(|f| f.density).sum();
            }
        });
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_circular_trajectory, rotation_about_z};

    fn small_geometry() -> ScanGeometry {
        ScanGeometry {
            n_views: 12,
            detector_rows: 8,
            detector_cols: 64,
            pixel_pitch_u: 4.0,
            pixel_pitch_v: 4.0,
            ..ScanGeometry::default()
        }
    }

    #[test]
    fn central_chord_is_diameter() {
        let p = Phantom::new(vec![Ellipsoid::sphere(Vector3::zeros(), 30.0, 1.0)]).unwrap();
        let v = ray_integral(&p, &Vector3::new(0.0, 500.0, 0.0), &Vector3::new(0.0, -1.0, 0.0));
        assert!((v - 60.0).abs() < 1e-12);
    }

    #[test]
    fn missing_ray_is_zero() {
        let p = Phantom::default_head();
        let v = ray_integral(&p, &Vector3::new(0.0, 500.0, 300.0), &Vector3::new(0.0, -1.0, 0.0));
        assert_eq!(v, 0.0);
    }

    #[test]
    fn rotated_ellipsoid_chord_matches_quadrature() {
        let e = Ellipsoid {
            center: Vector3::new(5.0, -3.0, 2.0),
            semi_axes: Vector3::new(20.0, 8.0, 12.0),
            z_rotation: 35.0,
            density: 1.3,
        };
        let p = Phantom::new(vec![e]).unwrap();
        let origin = Vector3::new(-60.0, 10.0, 4.0);
        let dir = Vector3::new(1.0, -0.35, 0.05).normalize();
        let exact = ray_integral(&p, &origin, &dir);

        let (t0, t1, n) = (0.0, 120.0, 100_000);
        let dt = (t1 - t0) / n as f64;
        let quad: f64 = (0..n)
            .map(|k| p.value_at(&(origin + dir * (t0 + (k as f64 + 0.5) * dt))) * dt)
            .sum();
        assert!(exact > 1.0);
        assert!(((exact - quad) / exact).abs() < 1e-4, "{exact} vs {quad}");
    }

    #[test]
    fn zero_density_projects_to_zero() {
        let g = small_geometry();
        let p = Phantom::new(vec![Ellipsoid::sphere(Vector3::zeros(), 30.0, 0.0)]).unwrap();
        let m = make_circular_trajectory(&g).unwrap();
        let s = forward_project(&p, &m, &g, None).unwrap();
        assert!(s.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn centered_sphere_rows_are_symmetric() {
        let g = small_geometry();
        let p = Phantom::new(vec![Ellipsoid::sphere(Vector3::zeros(), 40.0, 1.0)]).unwrap();
        let m = make_circular_trajectory(&g).unwrap();
        let s = forward_project(&p, &m, &g, None).unwrap();
        let cols = g.detector_cols;
        for view in 0..g.n_views {
            let row = s.row(view, g.detector_rows / 2);
            for c in 0..cols / 2 {
                assert!((row[c] - row[cols - 1 - c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rotation_motion_equals_rotated_object() {
        let g = small_geometry();
        let m = make_circular_trajectory(&g).unwrap();
        let center = Vector3::new(25.0, -10.0, 3.0);
        let theta = 7.5;
        let moved = rotation_about_z(theta);
        let p = Phantom::new(vec![Ellipsoid::sphere(center, 15.0, 1.0)]).unwrap();
        let traj = MotionTrajectory::new(vec![moved; g.n_views]);
        let corrupted = forward_project(&p, &m, &g, Some(&traj)).unwrap();
        let rotated_center = moved.rotation() * center;
        let q = Phantom::new(vec![Ellipsoid::sphere(rotated_center, 15.0, 1.0)]).unwrap();
        let expected = forward_project(&q, &m, &g, None).unwrap();
        for (a, b) in corrupted.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn projection_is_linear_in_ellipsoids() {
        let g = small_geometry();
        let m = make_circular_trajectory(&g).unwrap();
        let a = Ellipsoid::sphere(Vector3::new(10.0, 0.0, 0.0), 20.0, 1.0);
        let b = Ellipsoid {
            center: Vector3::new(-15.0, 12.0, 0.0),
            semi_axes: Vector3::new(9.0, 14.0, 10.0),
            z_rotation: 20.0,
            density: 0.4,
        };
        let both = forward_project(&Phantom::new(vec![a.clone(), b.clone()]).unwrap(), &m, &g, None)
            .unwrap();
        let pa = forward_project(&Phantom::new(vec![a]).unwrap(), &m, &g, None).unwrap();
        let pb = forward_project(&Phantom::new(vec![b]).unwrap(), &m, &g, None).unwrap();
        for ((s, x), y) in both.data().iter().zip(pa.data()).zip(pb.data()) {
            assert!((s - (x + y)).abs() < 1e-12);
        }
    }

    #[test]
    fn render_values() {
        let sphere = Phantom::new(vec![Ellipsoid::sphere(Vector3::zeros(), 30.0, 1.0)]).unwrap();
        let img = render_slice(&sphere, 64, 100.0, 0.0).unwrap();
        assert_eq!(img.get(32, 32), 1.0);
        let nested = Phantom::new(vec![
            Ellipsoid::sphere(Vector3::zeros(), 30.0, 1.0),
            Ellipsoid::sphere(Vector3::zeros(), 10.0, -0.5),
        ])
        .unwrap();
        let img = render_slice(&nested, 64, 100.0, 0.0).unwrap();
        assert_eq!(img.get(32, 32), 0.5);
    }

    #[test]
    fn rendered_area_matches_disc_area() {
        let r = 30.0;
        let z = 12.0;
        let sphere = Phantom::new(vec![Ellipsoid::sphere(Vector3::zeros(), r, 1.0)]).unwrap();
        let (grid, fov) = (128, 100.0);
        let img = render_slice(&sphere, grid, fov, z).unwrap();
        let mass: f64 = img.pixels().iter().sum();
        let r_slice2 = r * r - z * z;
        let spacing = fov / grid as f64;
        let expected = std::f64::consts::PI * r_slice2 / (spacing * spacing);
        assert!(((mass - expected) / expected).abs() < 0.02);
    }

    #[test]
    fn default_head_fits_desk_scanner() {
        let p = Phantom::default_head();
        let g = ScanGeometry::default();
        p.check_fits(&g).unwrap();
        assert!(p.extent() < g.field_of_view_radius() + 5.0);
        assert_eq!(Phantom::parse(&p.to_text()).unwrap(), p);
        let v = p.variant(3);
        assert_ne!(v, p);
        assert_eq!(v, p.variant(3));
        assert_eq!(p.variant(0), p);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let err = Phantom::parse("0 0 0 1 1 1 0 1\n1 2 3\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(Phantom::parse("# nothing\n").is_err());
        assert!(Phantom::parse("0 0 0 1 -1 1 0 1").is_err());
    }
}
