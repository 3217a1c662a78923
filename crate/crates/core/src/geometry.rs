//! Circular cone-beam acquisition geometry.
//!
//! Conventions: the rotation axis is the world z-axis. View angles increase
//! counter-clockwise seen from +z, and view 0 (with `start_angle = 0`) puts the
//! source on the +y axis. The detector u-axis is tangential to the source
//! circle and points along +x at view 0; the v-axis points along +z.
//! Pixel `(col, row)` is centered at detector coordinate `(u, v) = (col, row)`.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Acquisition parameters of a circular cone-beam scan. Distances in mm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanGeometry {
    pub n_views: usize,
    pub source_axis_distance: f64,
    pub source_detector_distance: f64,
    pub detector_rows: usize,
    pub detector_cols: usize,
    pub pixel_pitch_u: f64,
    pub pixel_pitch_v: f64,
    /// Total angle covered by the views, degrees. `None` means a full turn
    /// minus one angular step.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub angular_range: Option<f64>,
    pub start_angle: f64,
}

impl Default for ScanGeometry {
    fn default() -> Self {
        Self {
            n_views: 496,
            source_axis_distance: 750.0,
            source_detector_distance: 1200.0,
            detector_rows: 64,
            detector_cols: 256,
            pixel_pitch_u: 1.0,
            pixel_pitch_v: 1.0,
            angular_range: None,
            start_angle: 0.0,
        }
    }
}

impl ScanGeometry {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(format!("geometry: {msg}")));
        if self.n_views < 2 {
            return fail("n_views must be at least 2");
        }
        if self.detector_rows == 0 || self.detector_cols == 0 {
            return fail("detector must have at least one row and one column");
        }
        let positive = [
            ("source_axis_distance", self.source_axis_distance),
            ("source_detector_distance", self.source_detector_distance),
            ("pixel_pitch_u", self.pixel_pitch_u),
            ("pixel_pitch_v", self.pixel_pitch_v),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return fail(&format!("{name} must be strictly positive"));
            }
        }
        if self.source_detector_distance <= self.source_axis_distance {
            return fail("source_detector_distance must exceed source_axis_distance");
        }
        if !self.start_angle.is_finite() {
            return fail("start_angle must be finite");
        }
        if let Some(range) = self.angular_range {
            if !(range.is_finite() && range > 0.0) {
                return fail("angular_range must be strictly positive");
            }
        }
        Ok(())
    }

    /// Angular range in degrees.
    pub fn angular_range(&self) -> f64 {
        self.angular_range
            .unwrap_or(360.0 * (self.n_views as f64 - 1.0) / self.n_views as f64)
    }

    /// Angular increment between consecutive views, degrees.
    pub fn angular_step(&self) -> f64 {
        self.angular_range() / (self.n_views as f64 - 1.0)
    }

    pub fn view_angle(&self, view: usize) -> f64 {
        self.start_angle + view as f64 * self.angular_step()
    }

    /// Detector coordinate of the principal point, in pixels.
    pub fn detector_center(&self) -> (f64, f64) {
        (
            self.detector_cols as f64 / 2.0 - 0.5,
            self.detector_rows as f64 / 2.0 - 0.5,
        )
    }

    /// Source-detector magnification at the isocenter.
    pub fn magnification(&self) -> f64 {
        self.source_detector_distance / self.source_axis_distance
    }

    /// The same scan restricted to the detector rows that the central
    /// (z = 0) slice reads from: two rows for an even row count, one row
    /// for an odd count. The ray through each retained pixel is unchanged.
    pub fn central_band(&self) -> ScanGeometry {
        let rows = if self.detector_rows % 2 == 0 { 2 } else { 1 };
        ScanGeometry {
            detector_rows: rows.min(self.detector_rows),
            ..self.clone()
        }
    }

    /// Radius of the cylinder around the rotation axis that every view sees
    /// in the axial plane, mm.
    pub fn field_of_view_radius(&self) -> f64 {
        let half_width = self.detector_cols as f64 * self.pixel_pitch_u / 2.0;
        let fan = (half_width / self.source_detector_distance).atan();
        self.source_axis_distance * fan.sin()
    }
}

/// Point of projective 3-space; x, y, z in mm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HomogeneousPoint(pub Vector4<f64>);

impl HomogeneousPoint {
    pub fn new(x: f64, y: f64, z: f64, w: f64) -> Result<Self> {
        let v = Vector4::new(x, y, z, w);
        if v.iter().all(|c| *c == 0.0) {
            return Err(Error::Contract("homogeneous point cannot be all zero".into()));
        }
        Ok(Self(v))
    }

    pub fn euclidean(x: f64, y: f64, z: f64) -> Self {
        Self(Vector4::new(x, y, z, 1.0))
    }

    pub fn coords(&self) -> &Vector4<f64> {
        &self.0
    }

    /// Dehomogenized position. Undefined for points at infinity.
    pub fn to_euclidean(&self) -> Vector3<f64> {
        self.0.xyz() / self.0.w
    }
}

/// Rigid patient motion, an element of SE(3). Translation in mm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidMotion {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

const ORTHONORMAL_TOL: f64 = 1e-9;

impl RigidMotion {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let defect = (rotation * rotation.transpose() - Matrix3::identity()).abs().max();
        if !(defect <= ORTHONORMAL_TOL) {
            return Err(Error::Contract(format!(
                "rotation is not orthonormal (defect {defect:e})"
            )));
        }
        let det = rotation.determinant();
        if !((det - 1.0).abs() <= ORTHONORMAL_TOL) {
            return Err(Error::Contract(format!("rotation determinant {det} is not +1")));
        }
        if !translation.iter().all(|t| t.is_finite()) {
            return Err(Error::Contract("translation must be finite".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == Matrix3::identity() && self.translation == Vector3::zeros()
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidMotion) -> RigidMotion {
        RigidMotion {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidMotion {
        let rt = self.rotation.transpose();
        RigidMotion {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Acts on a homogeneous point; the w component is preserved.
    pub fn apply(&self, x: &HomogeneousPoint) -> HomogeneousPoint {
        let c = x.0;
        let moved = self.rotation * c.xyz() + self.translation * c.w;
        HomogeneousPoint(Vector4::new(moved.x, moved.y, moved.z, c.w))
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Row-major `[R | t]`, 12 entries.
    pub fn to_row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out
    }

    pub fn from_row_major(entries: &[f64; 12]) -> Result<Self> {
        let rotation = Matrix3::from_fn(|r, c| entries[r * 4 + c]);
        let translation = Vector3::new(entries[3], entries[7], entries[11]);
        Self::new(rotation, translation)
    }
}

/// Right-handed rotation about the world z-axis (patient longitudinal axis).
pub fn rotation_about_z(angle_deg: f64) -> RigidMotion {
    let (s, c) = angle_deg.to_radians().sin_cos();
    RigidMotion {
        rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
        translation: Vector3::zeros(),
    }
}

pub fn compose(a: &RigidMotion, b: &RigidMotion) -> RigidMotion {
    a.compose(b)
}

pub fn apply(m: &RigidMotion, x: &HomogeneousPoint) -> HomogeneousPoint {
    m.apply(x)
}

/// World (mm, homogeneous) to detector pixel mapping of one view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionMatrix(Matrix3x4<f64>);

impl ProjectionMatrix {
    pub fn new(m: Matrix3x4<f64>) -> Result<Self> {
        let left = m.fixed_view::<3, 3>(0, 0).into_owned();
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::Contract("projection matrix has non-finite entries".into()));
        }
        if left.determinant() == 0.0 || left.try_inverse().is_none() {
            return Err(Error::Contract(
                "projection matrix left 3x3 block is singular".into(),
            ));
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Matrix3x4<f64> {
        &self.0
    }

    /// `P · M`: the projection seen by a patient that has moved by `motion`.
    pub fn with_motion(&self, motion: &RigidMotion) -> ProjectionMatrix {
        ProjectionMatrix(self.0 * motion.to_homogeneous())
    }

    pub fn project(&self, x: &HomogeneousPoint) -> Result<[f64; 2]> {
        let h = self.0 * x.0;
        if h.z == 0.0 {
            return Err(Error::PrincipalPlane);
        }
        Ok([h.x / h.z, h.y / h.z])
    }

    /// Depth of a point relative to the isocenter depth (1 at the isocenter
    /// for trajectories built by [`make_circular_trajectory`]).
    pub fn relative_depth(&self, x: &HomogeneousPoint) -> f64 {
        self.0.row(2).transpose().dot(&x.0)
    }

    /// Inverse of the left 3x3 block; maps `(u, v, 1)` to ray directions.
    pub fn left_inverse(&self) -> Matrix3<f64> {
        self.0
            .fixed_view::<3, 3>(0, 0)
            .into_owned()
            .try_inverse()
            .expect("validated at construction")
    }

    /// Camera center in world coordinates (right null vector of the matrix).
    pub fn source_position(&self) -> Vector3<f64> {
        -(self.left_inverse() * self.0.column(3))
    }

    /// Unit direction of the ray from the source through detector point
    /// `(u, v)`, pointing away from the source.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        (self.left_inverse() * Vector3::new(u, v, 1.0)).normalize()
    }

    pub fn to_row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..4 {
                out[r * 4 + c] = self.0[(r, c)];
            }
        }
        out
    }
}

pub fn project(p: &ProjectionMatrix, x: &HomogeneousPoint) -> Result<[f64; 2]> {
    p.project(x)
}

/// One projection matrix per view of a circular scan, normalized so that
/// the third row evaluated at the isocenter equals 1.
pub fn make_circular_trajectory(geometry: &ScanGeometry) -> Result<Vec<ProjectionMatrix>> {
    geometry.validate()?;
    let sad = geometry.source_axis_distance;
    let sdd = geometry.source_detector_distance;
    let (cu, cv) = geometry.detector_center();
    let intrinsics = Matrix3::new(
        sdd / geometry.pixel_pitch_u,
        0.0,
        cu,
        0.0,
        sdd / geometry.pixel_pitch_v,
        cv,
        0.0,
        0.0,
        1.0,
    );
    (0..geometry.n_views)
        .map(|view| {
            let (s, c) = geometry.view_angle(view).to_radians().sin_cos();
            let source = Vector3::new(-s * sad, c * sad, 0.0);
            // rows: detector u-axis, detector v-axis, viewing direction
            let rotation = Matrix3::new(c, s, 0.0, 0.0, 0.0, 1.0, s, -c, 0.0);
            let mut extrinsics = Matrix3x4::zeros();
            extrinsics.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
            extrinsics
                .fixed_view_mut::<3, 1>(0, 3)
                .copy_from(&(-(rotation * source)));
            ProjectionMatrix::new(intrinsics * extrinsics / sad)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk() -> ScanGeometry {
        ScanGeometry::default()
    }

    #[test]
    fn isocenter_projects_to_detector_center() {
        let g = desk();
        let (cu, cv) = g.detector_center();
        let iso = HomogeneousPoint::euclidean(0.0, 0.0, 0.0);
        for p in make_circular_trajectory(&g).unwrap() {
            let [u, v] = p.project(&iso).unwrap();
            assert!((u - cu).abs() < 1e-9 && (v - cv).abs() < 1e-9);
            assert!((p.relative_depth(&iso) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn paper_view_count_supported() {
        let g = ScanGeometry {
            n_views: 496,
            ..desk()
        };
        assert_eq!(make_circular_trajectory(&g).unwrap().len(), 496);
    }

    #[test]
    fn off_axis_point_follows_similar_triangles() {
        let g = desk();
        let p = make_circular_trajectory(&g).unwrap()[0];
        let [u, v] = p.project(&HomogeneousPoint::euclidean(50.0, 0.0, 0.0)).unwrap();
        let (cu, cv) = g.detector_center();
        let expected = 50.0 * 1200.0 / 750.0;
        assert!((u - cu - expected).abs() < 1e-9, "u offset {}", u - cu);
        assert!((v - cv).abs() < 1e-9);
    }

    #[test]
    fn axis_points_only_move_vertically() {
        let g = desk();
        let (cu, _) = g.detector_center();
        for p in make_circular_trajectory(&g).unwrap() {
            for dz in [-3.0, 0.5, 7.0] {
                let [u, _] = p.project(&HomogeneousPoint::euclidean(0.0, 0.0, dz)).unwrap();
                assert!((u - cu).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn trajectory_is_deterministic() {
        let g = desk();
        let a = make_circular_trajectory(&g).unwrap();
        let b = make_circular_trajectory(&g).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_row_major() == y.to_row_major()));
    }

    #[test]
    fn invalid_geometry_names_constraint() {
        let g = ScanGeometry {
            source_detector_distance: 500.0,
            ..desk()
        };
        let err = make_circular_trajectory(&g).unwrap_err().to_string();
        assert!(err.contains("source_detector_distance"), "{err}");
        let g = ScanGeometry {
            n_views: 1,
            ..desk()
        };
        assert!(make_circular_trajectory(&g).unwrap_err().to_string().contains("n_views"));
    }

    #[test]
    fn identity_like_projection() {
        let mut m = Matrix3x4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
        let p = ProjectionMatrix::new(m).unwrap();
        let x = HomogeneousPoint::new(1.0, 2.0, 1.0, 1.0).unwrap();
        assert_eq!(p.project(&x).unwrap(), [1.0, 2.0]);
        let x2 = HomogeneousPoint(x.0 * 2.0);
        assert_eq!(p.project(&x2).unwrap(), [1.0, 2.0]);
    }

    #[test]
    fn principal_plane_is_an_error() {
        let g = desk();
        let p = make_circular_trajectory(&g).unwrap()[0];
        // source on +y at 750 mm; the principal plane is y = 750
        let x = HomogeneousPoint::euclidean(10.0, 750.0, 0.0);
        assert!(matches!(p.project(&x), Err(Error::PrincipalPlane)));
    }

    #[test]
    fn source_and_rays_are_consistent() {
        let g = desk();
        let p = make_circular_trajectory(&g).unwrap()[0];
        let s = p.source_position();
        assert!((s - Vector3::new(0.0, 750.0, 0.0)).norm() < 1e-9);
        let (cu, cv) = g.detector_center();
        let d = p.ray_direction(cu, cv);
        assert!((d - Vector3::new(0.0, -1.0, 0.0)).norm() < 1e-12);
        let x = s + 300.0 * p.ray_direction(cu + 17.0, cv - 4.0);
        let [u, v] = p.project(&HomogeneousPoint::euclidean(x.x, x.y, x.z)).unwrap();
        assert!((u - cu - 17.0).abs() < 1e-9 && (v - cv + 4.0).abs() < 1e-9);
    }

    #[test]
    fn z_rotation_basics() {
        assert_eq!(rotation_about_z(0.0), RigidMotion::identity());
        let x = rotation_about_z(90.0).apply(&HomogeneousPoint::euclidean(1.0, 0.0, 0.0));
        assert!((x.0 - Vector4::new(0.0, 1.0, 0.0, 1.0)).norm() < 1e-12);
        let m = rotation_about_z(0.35);
        let (s, c) = (0.35f64 * std::f64::consts::PI / 180.0).sin_cos();
        let r = m.rotation();
        for (got, want) in [(r[(0, 0)], c), (r[(0, 1)], -s), (r[(1, 0)], s), (r[(1, 1)], c)] {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn composition_of_z_rotations_adds_angles() {
        let a = rotation_about_z(12.5);
        let b = rotation_about_z(-40.25);
        let ab = compose(&a, &b);
        let expected = rotation_about_z(12.5 - 40.25);
        assert!((ab.rotation() - expected.rotation()).abs().max() < 1e-12);
        assert_eq!(compose(&a, &RigidMotion::identity()), a);
    }

    #[test]
    fn rigid_motion_rejects_non_rotations() {
        let skew = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(RigidMotion::new(skew, Vector3::zeros()).is_err());
        let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(RigidMotion::new(reflect, Vector3::zeros()).is_err());
    }

    #[test]
    fn central_band_keeps_rays() {
        let g = desk();
        let band = g.central_band();
        assert_eq!(band.detector_rows, 2);
        let full = make_circular_trajectory(&g).unwrap();
        let thin = make_circular_trajectory(&band).unwrap();
        let row0 = g.detector_rows / 2 - 1;
        for (a, b) in full.iter().zip(&thin) {
            let da = a.ray_direction(10.0, row0 as f64);
            let db = b.ray_direction(10.0, 0.0);
            assert!((da - db).norm() < 1e-12);
        }
    }
}
