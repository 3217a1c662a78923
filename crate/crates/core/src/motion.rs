//! Spline-parameterized rigid motion, random motion generation and the
//! reprojection error (RPE) metric.
//!
//! The RPE of a trajectory is the mean, over all (sample point, view)
//! pairs, of the squared detector-plane distance between the point's
//! projection with and without motion. Detector coordinates are converted
//! from pixels to mm with the pixel pitch, so RPE values are in mm².
//! Following common usage the value is reported as "mm".

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    make_circular_trajectory, rotation_about_z, HomogeneousPoint, ProjectionMatrix, RigidMotion,
    ScanGeometry,
};
use crate::spline::Akima;

/// Per-view rigid motion of the patient over one acquisition.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionTrajectory {
    motions: Vec<RigidMotion>,
}

impl MotionTrajectory {
    pub fn new(motions: Vec<RigidMotion>) -> Self {
        Self { motions }
    }

    pub fn identity(n_views: usize) -> Self {
        Self {
            motions: vec![RigidMotion::identity(); n_views],
        }
    }

    pub fn from_z_angles(angles_deg: &[f64]) -> Self {
        Self {
            motions: angles_deg.iter().map(|a| rotation_about_z(*a)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.motions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.motions.is_empty()
    }

    pub fn motions(&self) -> &[RigidMotion] {
        &self.motions
    }

    pub fn get(&self, view: usize) -> &RigidMotion {
        &self.motions[view]
    }

    /// Rotation angle about z of each view, degrees.
    pub fn z_angles(&self) -> Vec<f64> {
        self.motions
            .iter()
            .map(|m| {
                let r = m.rotation();
                r[(1, 0)].atan2(r[(0, 0)]).to_degrees()
            })
            .collect()
    }

    pub fn moving_views(&self) -> usize {
        self.motions.iter().filter(|m| !m.is_identity()).count()
    }
}

/// Akima-spline model of the per-view z-rotation (degrees).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplineMotionModel {
    pub node_positions: Vec<f64>,
    pub node_values: Vec<f64>,
    /// Half-open view interval `[start, end)`; views outside are motion free.
    pub active_window: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl SplineMotionModel {
    /// Nodes equally spaced over `[0, n_views - 1]`, active everywhere.
    pub fn equispaced(n_views: usize, node_values: Vec<f64>) -> Self {
        Self {
            node_positions: equispaced_positions(node_values.len(), n_views),
            node_values,
            active_window: [0, n_views],
            seed: None,
        }
    }

    pub fn zero(n_views: usize, n_nodes: usize) -> Self {
        Self::equispaced(n_views, vec![0.0; n_nodes])
    }

    pub fn n_nodes(&self) -> usize {
        self.node_positions.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_nodes() < 2 {
            return Err(Error::Config("spline model needs at least 2 nodes".into()));
        }
        if self.node_values.len() != self.n_nodes() {
            return Err(Error::Config(format!(
                "spline model has {} positions but {} values",
                self.n_nodes(),
                self.node_values.len()
            )));
        }
        if self.node_positions.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config(
                "spline node positions must be strictly increasing".into(),
            ));
        }
        if self.node_values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("spline node values must be finite".into()));
        }
        if self.active_window[0] > self.active_window[1] {
            return Err(Error::Config("active window start exceeds its end".into()));
        }
        Ok(())
    }

    /// Per-view rotation angles (degrees) of the modeled trajectory.
    pub fn angles(&self, n_views: usize) -> Result<Vec<f64>> {
        self.validate()?;
        let last = (n_views.max(1) - 1) as f64;
        let (first, end) = (self.node_positions[0], self.node_positions[self.n_nodes() - 1]);
        if first.abs() > 1e-9 || (end - last).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "spline nodes span [{first}, {end}] but views span [0, {last}]"
            )));
        }
        let spline = Akima::new(&self.node_positions, &self.node_values)?;
        let [start, stop] = self.active_window;
        (0..n_views)
            .map(|view| {
                if view < start || view >= stop {
                    Ok(0.0)
                } else {
                    spline.eval((view as f64).clamp(first, end))
                }
            })
            .collect()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            node_values: self.node_values.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

pub fn equispaced_positions(n_nodes: usize, n_views: usize) -> Vec<f64> {
    let last = (n_views.max(1) - 1) as f64;
    let denom = (n_nodes.max(2) - 1) as f64;
    let mut positions: Vec<f64> = (0..n_nodes).map(|k| k as f64 * last / denom).collect();
    if let Some(end) = positions.last_mut() {
        *end = last;
    }
    positions
}

/// Samples the spline at every view. Views outside the active window get
/// the identity motion.
pub fn spline_to_trajectory(model: &SplineMotionModel, n_views: usize) -> Result<MotionTrajectory> {
    let angles = model.angles(n_views)?;
    let [start, stop] = model.active_window;
    Ok(MotionTrajectory::new(
        angles
            .iter()
            .enumerate()
            .map(|(view, a)| {
                if view < start || view >= stop || *a == 0.0 {
                    RigidMotion::identity()
                } else {
                    rotation_about_z(*a)
                }
            })
            .collect(),
    ))
}

/// Sampling of the reference sphere used by the RPE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RpeConfig {
    pub sphere_radius: f64,
    pub n_points: usize,
    /// Rotates the lattice about z; 0 leaves it unrotated.
    pub sampling_seed: u64,
}

impl Default for RpeConfig {
    fn default() -> Self {
        Self {
            sphere_radius: 100.0,
            n_points: 100,
            sampling_seed: 0,
        }
    }
}

impl RpeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sphere_radius.is_finite() && self.sphere_radius > 0.0) {
            return Err(Error::Config("rpe: sphere_radius must be positive".into()));
        }
        if self.n_points < 4 {
            return Err(Error::Config("rpe: n_points must be at least 4".into()));
        }
        Ok(())
    }
}

/// Fibonacci-lattice points on the sphere around the isocenter (w = 1).
pub fn sample_sphere_points(config: &RpeConfig) -> Result<Vec<HomogeneousPoint>> {
    config.validate()?;
    let n = config.n_points as f64;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let offset = if config.sampling_seed == 0 {
        0.0
    } else {
        ChaCha8Rng::seed_from_u64(config.sampling_seed).gen_range(0.0..std::f64::consts::TAU)
    };
    Ok((0..config.n_points)
        .map(|k| {
            let z = 1.0 - (2.0 * k as f64 + 1.0) / n;
            let r = (1.0 - z * z).sqrt();
            let (s, c) = (offset + k as f64 * golden).sin_cos();
            let radius = config.sphere_radius;
            HomogeneousPoint::euclidean(radius * r * c, radius * r * s, radius * z)
        })
        .collect())
}

/// Precomputed state for repeated RPE evaluations on a fixed acquisition.
#[derive(Clone, Debug)]
pub struct RpeEvaluator {
    matrices: Vec<ProjectionMatrix>,
    points: Vec<HomogeneousPoint>,
    pitch: (f64, f64),
    /// Motion-free projections, `[view][point]`, in mm.
    reference: Vec<Vec<[f64; 2]>>,
}

impl RpeEvaluator {
    pub fn new(
        matrices: Vec<ProjectionMatrix>,
        points: Vec<HomogeneousPoint>,
        pitch: (f64, f64),
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Contract("rpe needs at least one sample point".into()));
        }
        if matrices.is_empty() {
            return Err(Error::Contract("rpe needs at least one view".into()));
        }
        let reference = matrices
            .iter()
            .enumerate()
            .map(|(view, p)| project_all(p, &points, pitch, view))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            matrices,
            points,
            pitch,
            reference,
        })
    }

    pub fn from_geometry(geometry: &ScanGeometry, config: &RpeConfig) -> Result<Self> {
        Self::new(
            make_circular_trajectory(geometry)?,
            sample_sphere_points(config)?,
            (geometry.pixel_pitch_u, geometry.pixel_pitch_v),
        )
    }

    pub fn n_views(&self) -> usize {
        self.matrices.len()
    }

    /// RPE of `traj` relative to the motion-free acquisition.
    pub fn rpe(&self, traj: &MotionTrajectory) -> Result<f64> {
        self.check_len(traj)?;
        self.accumulate(|view| {
            let m = traj.get(view);
            if m.is_identity() {
                return Ok(0.0);
            }
            let moved = self.project_moved(view, m)?;
            Ok(squared_distance_sum(&moved, &self.reference[view]))
        })
    }

    /// RPE between two trajectories: mean squared distance between the
    /// projections of each point under `a` and under `b`.
    pub fn rpe_between(&self, a: &MotionTrajectory, b: &MotionTrajectory) -> Result<f64> {
        self.check_len(a)?;
        self.check_len(b)?;
        self.accumulate(|view| {
            let (ma, mb) = (a.get(view), b.get(view));
            if ma == mb {
                return Ok(0.0);
            }
            let pa = if ma.is_identity() {
                self.reference[view].clone()
            } else {
                self.project_moved(view, ma)?
            };
            let pb = if mb.is_identity() {
                self.reference[view].clone()
            } else {
                self.project_moved(view, mb)?
            };
            Ok(squared_distance_sum(&pa, &pb))
        })
    }

    fn check_len(&self, traj: &MotionTrajectory) -> Result<()> {
        if traj.len() != self.matrices.len() {
            return Err(Error::Contract(format!(
                "trajectory has {} views but acquisition has {}",
                traj.len(),
                self.matrices.len()
            )));
        }
        Ok(())
    }

    fn project_moved(&self, view: usize, motion: &RigidMotion) -> Result<Vec<[f64; 2]>> {
        let moved = self.matrices[view].with_motion(motion);
        project_all(&moved, &self.points, self.pitch, view)
    }

    /// Per-view partial sums are computed independently and reduced in view
    /// order, so the result does not depend on thread scheduling.
    fn accumulate<F>(&self, per_view: F) -> Result<f64>
    where
        F: Fn(usize) -> Result<f64> + Sync + Send,
    {
        let partial: Vec<f64> = (0..self.matrices.len())
            .into_par_iter()
            .map(per_view)
            .collect::<Result<_>>()?;
        let total: f64 = partial.iter().sum();
        Ok(total / (self.points.len() * self.matrices.len()) as f64)
    }
}

fn project_all(
    p: &ProjectionMatrix,
    points: &[HomogeneousPoint],
    pitch: (f64, f64),
    view: usize,
) -> Result<Vec<[f64; 2]>> {
    points
        .iter()
        .enumerate()
        .map(|(point, x)| {
            p.project(x)
                .map(|[u, v]| [u * pitch.0, v * pitch.1])
                .map_err(|_| Error::ProjectionAtInfinity { view, point })
        })
        .collect()
}

fn squared_distance_sum(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| {
            let (du, dv) = (p[0] - q[0], p[1] - q[1]);
            du * du + dv * dv
        })
        .sum()
}

/// One-shot RPE of a trajectory on the given acquisition.
pub fn reprojection_error(
    traj: &MotionTrajectory,
    matrices: &[ProjectionMatrix],
    points: &[HomogeneousPoint],
    geometry: &ScanGeometry,
) -> Result<f64> {
    if traj.len() != matrices.len() {
        return Err(Error::Contract(format!(
            "trajectory has {} views but {} projection matrices were given",
            traj.len(),
            matrices.len()
        )));
    }
    RpeEvaluator::new(
        matrices.to_vec(),
        points.to_vec(),
        (geometry.pixel_pitch_u, geometry.pixel_pitch_v),
    )?
    .rpe(traj)
}

/// Parameters of random spline motion generation.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionRequest {
    pub n_views: usize,
    pub n_nodes: usize,
    pub target_rpe: f64,
    pub active_fraction: f64,
    pub seed: u64,
}

const MAX_BISECTION_STEPS: usize = 50;
const RPE_REL_TOL: f64 = 0.005;

/// Draws a random spline motion confined to a contiguous window covering
/// `active_fraction` of the views, scaled so that its RPE hits `target_rpe`
/// within 1 % relative.
///
/// Nodes outside the window and the first and last node inside it are
/// pinned to zero, so the motion starts and stops continuously inside the
/// window.
pub fn random_motion(request: &MotionRequest, evaluator: &RpeEvaluator) -> Result<SplineMotionModel> {
    let MotionRequest {
        n_views,
        n_nodes,
        target_rpe,
        active_fraction,
        seed,
    } = *request;
    if n_nodes < 2 {
        return Err(Error::Config("random motion needs at least 2 nodes".into()));
    }
    if !(active_fraction > 0.0 && active_fraction <= 1.0) {
        return Err(Error::Config("active_fraction must lie in (0, 1]".into()));
    }
    if !(target_rpe >= 0.0 && target_rpe.is_finite()) {
        return Err(Error::Config("target_rpe must be finite and non-negative".into()));
    }
    if evaluator.n_views() != n_views {
        return Err(Error::Contract(format!(
            "evaluator has {} views, request has {n_views}",
            evaluator.n_views()
        )));
    }

    let positions = equispaced_positions(n_nodes, n_views);
    let length = ((active_fraction * n_views as f64).ceil() as usize).clamp(1, n_views);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut window = None;
    for _ in 0..100 {
        let start = rng.gen_range(0..=n_views - length);
        let inside: Vec<usize> = (0..n_nodes)
            .filter(|&k| positions[k] >= start as f64 && positions[k] < (start + length) as f64)
            .collect();
        if inside.len() >= 3 {
            window = Some((start, inside));
            break;
        }
    }
    let Some((start, inside)) = window else {
        return Err(Error::Generation(format!(
            "a window of {length} views cannot hold a free node between two pinned nodes \
             with {n_nodes} nodes over {n_views} views"
        )));
    };
    let free = &inside[1..inside.len() - 1];
    let mut base = vec![0.0; n_nodes];
    for &k in free {
        base[k] = rng.gen_range(-1.0..1.0);
    }

    let unit = SplineMotionModel {
        node_positions: positions,
        node_values: base,
        active_window: [start, start + length],
        seed: Some(seed),
    };
    if target_rpe == 0.0 {
        return Ok(unit.scaled(0.0));
    }

    let rpe_at = |scale: f64| -> Result<f64> {
        evaluator.rpe(&spline_to_trajectory(&unit.scaled(scale), n_views)?)
    };
    let within = |rpe: f64| (rpe - target_rpe).abs() <= RPE_REL_TOL * target_rpe;

    let mut hi = 1.0;
    let mut rpe_hi = rpe_at(hi)?;
    let mut doublings = 0;
    while rpe_hi < target_rpe {
        if doublings == 64 || rpe_hi == 0.0 && doublings > 4 {
            return Err(Error::Generation(format!(
                "cannot reach target rpe {target_rpe} (got {rpe_hi} at scale {hi})"
            )));
        }
        hi *= 2.0;
        rpe_hi = rpe_at(hi)?;
        doublings += 1;
    }
    if within(rpe_hi) {
        return Ok(unit.scaled(hi));
    }
    let mut lo = 0.0;
    for _ in 0..MAX_BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        let rpe = rpe_at(mid)?;
        if within(rpe) {
            return Ok(unit.scaled(mid));
        }
        if rpe < target_rpe {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Generation(format!(
        "rpe scaling did not converge to {target_rpe} within {MAX_BISECTION_STEPS} bisection steps"
    )))
}
