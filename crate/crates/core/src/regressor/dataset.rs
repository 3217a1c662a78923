//! Synthesis of labelled motion-artifact reconstructions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{make_circular_trajectory, ProjectionMatrix, ScanGeometry};
use crate::image::SliceImage;
use crate::motion::{
    random_motion, spline_to_trajectory, MotionRequest, RpeConfig, RpeEvaluator, SplineMotionModel,
};
use crate::phantom::{forward_project, Phantom};
use crate::recon::ReconSettings;

/// Every tenth draw per phantom is motion free.
pub const ZERO_MOTION_PERIOD: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub image: SliceImage,
    /// RPE of the generating trajectory in mm.
    pub rpe_label: f64,
    pub seed: u64,
    pub phantom_index: usize,
    pub motion: SplineMotionModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_trajectories_per_phantom: usize,
    pub rpe_range: [f64; 2],
    pub seed: u64,
    pub n_nodes: usize,
    pub active_fraction: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_trajectories_per_phantom: 100,
            rpe_range: [0.0, 0.6],
            seed: 0,
            n_nodes: 10,
            active_fraction: 0.33,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.rpe_range;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("rpe_range [{lo}, {hi}] must satisfy 0 <= lo <= hi")));
        }
        if self.n_nodes < 2 {
            return Err(Error::Config("motion splines need at least 2 nodes".into()));
        }
        Ok(())
    }
}

struct Draw {
    phantom_index: usize,
    target_rpe: f64,
    seed: u64,
}

/// Simulates motion-corrupted scans and reconstructs each without
/// compensation, labelling the slice with the true RPE.
///
/// Projections are simulated on the central detector band, which holds
/// every ray the central slice reads. RPE labels use the full `geometry`.
pub fn generate_dataset(
    phantoms: &[Phantom],
    spec: &DatasetSpec,
    geometry: &ScanGeometry,
    recon: &ReconSettings,
    rpe_config: &RpeConfig,
) -> Result<Vec<TrainingSample>> {
    spec.validate()?;
    geometry.validate()?;
    recon.validate()?;
    if spec.n_trajectories_per_phantom == 0 || phantoms.is_empty() {
        return Ok(Vec::new());
    }
    let evaluator = RpeEvaluator::from_geometry(geometry, rpe_config)?;
    let band = geometry.central_band();
    let matrices = make_circular_trajectory(&band)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [lo, hi] = spec.rpe_range;
    let mut draws = Vec::with_capacity(phantoms.len() * spec.n_trajectories_per_phantom);
    for phantom_index in 0..phantoms.len() {
        for j in 0..spec.n_trajectories_per_phantom {
            let target: f64 = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            // 63 bits, so the seed stays representable in TOML files
            let seed: u64 = rng.gen::<u64>() >> 1;
            draws.push(Draw {
                phantom_index,
                target_rpe: if j % ZERO_MOTION_PERIOD == 0 { 0.0 } else { target },
                seed,
            });
        }
    }

    draws
        .par_iter()
        .map(|d| simulate_sample(&phantoms[d.phantom_index], d, spec, &band, &matrices, recon, &evaluator))
        .collect()
}

fn simulate_sample(
    phantom: &Phantom,
    draw: &Draw,
    spec: &DatasetSpec,
    band: &ScanGeometry,
    matrices: &[ProjectionMatrix],
    recon: &ReconSettings,
    evaluator: &RpeEvaluator,
) -> Result<TrainingSample> {
    let n_views = band.n_views;
    let motion = random_motion(
        &MotionRequest {
            n_views,
            n_nodes: spec.n_nodes,
            target_rpe: draw.target_rpe,
            active_fraction: spec.active_fraction,
            seed: draw.seed,
        },
        evaluator,
    )?;
    let trajectory = spline_to_trajectory(&motion, n_views)?;
    let label = if draw.target_rpe == 0.0 { 0.0 } else { evaluator.rpe(&trajectory)? };
    let stack = forward_project(phantom, matrices, band, Some(&trajectory))?;
    let image = recon
        .backprojector(&stack, matrices)?
        .reconstruct(&crate::motion::MotionTrajectory::identity(n_views))?;
    Ok(TrainingSample {
        image,
        rpe_label: label,
        seed: draw.seed,
        phantom_index: draw.phantom_index,
        motion,
    })
}
