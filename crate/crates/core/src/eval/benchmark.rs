//! Seeded compensation benchmark: corrupt the phantom scan with random
//! motion, compensate it with every metric arm and score the results
//! against the ground-truth slice.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ssim::ssim;
use crate::autofocus::{compensate, CompensationProblem, IterationTrace, SimplexConfig};
use crate::error::{Error, Result};
use crate::geometry::{make_circular_trajectory, ScanGeometry};
use crate::image::{DisplayWindow, SliceImage};
use crate::iqm::{Iqm, IqmKind, OracleRef, DEFAULT_BINS};
use crate::motion::{
    random_motion, spline_to_trajectory, MotionRequest, MotionTrajectory, RpeConfig, RpeEvaluator,
    SplineMotionModel,
};
use crate::phantom::{forward_project, render_slice, Phantom};
use crate::recon::ReconSettings;
use crate::regressor::RegressorModel;
use crate::stats::median;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioName {
    InverseCrime,
    ClinicalSetting,
}

impl ScenarioName {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "inverse_crime" => Ok(ScenarioName::InverseCrime),
            "clinical_setting" => Ok(ScenarioName::ClinicalSetting),
            other => Err(Error::Config(format!(
                "unknown scenario '{other}' (expected inverse_crime or clinical_setting)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioName::InverseCrime => "inverse_crime",
            ScenarioName::ClinicalSetting => "clinical_setting",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkScenario {
    pub name: ScenarioName,
    pub gen_nodes: usize,
    pub comp_nodes: usize,
    /// RPE of the simulated corruption in mm.
    pub target_rpe: f64,
    pub active_fraction: f64,
    pub seeds: Vec<u64>,
    pub arms: Vec<IqmKind>,
}

impl BenchmarkScenario {
    /// Generation and compensation share 15 nodes.
    pub fn inverse_crime() -> Self {
        Self {
            name: ScenarioName::InverseCrime,
            gen_nodes: 15,
            comp_nodes: 15,
            target_rpe: 0.3,
            active_fraction: 0.33,
            seeds: (1..=5).collect(),
            arms: vec![IqmKind::OracleRpe, IqmKind::Entropy, IqmKind::Learned],
        }
    }

    /// Ten generation nodes, twenty compensation nodes.
    pub fn clinical_setting() -> Self {
        Self {
            name: ScenarioName::ClinicalSetting,
            gen_nodes: 10,
            comp_nodes: 20,
            target_rpe: 0.3,
            active_fraction: 0.33,
            seeds: (1..=5).collect(),
            arms: vec![IqmKind::Entropy, IqmKind::Learned],
        }
    }

    pub fn named(name: ScenarioName) -> Self {
        match name {
            ScenarioName::InverseCrime => Self::inverse_crime(),
            ScenarioName::ClinicalSetting => Self::clinical_setting(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name == ScenarioName::InverseCrime && self.gen_nodes != self.comp_nodes {
            return Err(Error::Config(
                "the inverse-crime scenario compensates with the generating node count".into(),
            ));
        }
        if self.gen_nodes < 2 || self.comp_nodes < 2 {
            return Err(Error::Config("spline node counts must be at least 2".into()));
        }
        if !(self.target_rpe >= 0.0 && self.target_rpe.is_finite()) {
            return Err(Error::Config("target_rpe must be finite and non-negative".into()));
        }
        if self.seeds.is_empty() || self.arms.is_empty() {
            return Err(Error::Config("a benchmark needs at least one seed and one arm".into()));
        }
        Ok(())
    }
}

/// Shared resources of a benchmark run.
#[derive(Clone, Copy, Debug)]
pub struct BenchmarkContext<'a> {
    pub phantom: &'a Phantom,
    pub geometry: &'a ScanGeometry,
    pub recon: ReconSettings,
    pub rpe: &'a RpeConfig,
    pub simplex: &'a SimplexConfig,
    pub model: Option<&'a RegressorModel>,
    pub window: DisplayWindow,
}

/// Outcome of one (seed, arm) cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArmResult {
    pub seed: u64,
    pub arm: IqmKind,
    pub ssim: f64,
    pub initial_rpe: f64,
    pub final_rpe: f64,
    pub evaluations: usize,
    pub wall_time_s: f64,
    pub stack_checksum: u32,
    pub error: Option<String>,
    #[serde(skip)]
    pub image: Option<SliceImage>,
    #[serde(skip)]
    pub trace: Option<IterationTrace>,
    #[serde(skip)]
    pub model: Option<SplineMotionModel>,
}

impl ArmResult {
    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }
}

/// Per-seed reference images and scores shared by all arms.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedBaseline {
    pub seed: u64,
    pub motion: SplineMotionModel,
    pub initial_rpe: f64,
    pub stack_checksum: u32,
    pub ground_truth: SliceImage,
    pub motion_free: SliceImage,
    pub corrupted: SliceImage,
    pub motion_free_ssim: f64,
    pub corrupted_ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkReport {
    pub scenario: BenchmarkScenario,
    pub window: DisplayWindow,
    pub baselines: Vec<SeedBaseline>,
    pub results: Vec<ArmResult>,
}

/// SSIM of two slices after the display window.
pub fn windowed_ssim(a: &SliceImage, b: &SliceImage, window: &DisplayWindow) -> Result<f64> {
    ssim(&window.apply(a), &window.apply(b))
}

pub fn run_benchmark(scenario: &BenchmarkScenario, ctx: &BenchmarkContext<'_>) -> Result<BenchmarkReport> {
    scenario.validate()?;
    ctx.recon.validate()?;
    let evaluator = RpeEvaluator::from_geometry(ctx.geometry, ctx.rpe)?;
    let band = ctx.geometry.central_band();
    let matrices = make_circular_trajectory(&band)?;
    let n_views = band.n_views;
    let ground_truth = render_slice(ctx.phantom, ctx.recon.grid_size, ctx.recon.fov_mm, 0.0)?;
    let clean = forward_project(ctx.phantom, &matrices, &band, None)?;
    let motion_free = ctx
        .recon
        .backprojector(&clean, &matrices)?
        .reconstruct(&MotionTrajectory::identity(n_views))?;
    let motion_free_ssim = windowed_ssim(&motion_free, &ground_truth, &ctx.window)?;

    let mut baselines = Vec::with_capacity(scenario.seeds.len());
    let mut results = Vec::new();
    for &seed in &scenario.seeds {
        let motion = random_motion(
            &MotionRequest {
                n_views,
                n_nodes: scenario.gen_nodes,
                target_rpe: scenario.target_rpe,
                active_fraction: scenario.active_fraction,
                seed,
            },
            &evaluator,
        )?;
        let truth = spline_to_trajectory(&motion, n_views)?;
        let initial_rpe = evaluator.rpe(&truth)?;
        let stack = forward_project(ctx.phantom, &matrices, &band, Some(&truth))?;
        let stack_checksum = stack.checksum();
        let corrupted = ctx
            .recon
            .backprojector(&stack, &matrices)?
            .reconstruct(&MotionTrajectory::identity(n_views))?;
        let corrupted_ssim = windowed_ssim(&corrupted, &ground_truth, &ctx.window)?;

        let oracle = OracleRef {
            evaluator: &evaluator,
            truth: &truth,
        };
        let cells: Vec<ArmResult> = scenario
            .arms
            .par_iter()
            .map(|&arm| {
                let started = Instant::now();
                let outcome = (|| -> Result<_> {
                    let iqm = Iqm::resolve(arm, DEFAULT_BINS, ctx.model, Some(oracle))?;
                    let problem = CompensationProblem {
                        stack: &stack,
                        matrices: &matrices,
                        n_comp_nodes: scenario.comp_nodes,
                        iqm,
                        recon: ctx.recon,
                        ground_truth: Some(oracle),
                    };
                    let comp = compensate(&problem, ctx.simplex)?;
                    let estimate = spline_to_trajectory(&comp.model, n_views)?;
                    let final_rpe = evaluator.rpe_between(&estimate, &truth)?;
                    let score = windowed_ssim(&comp.image, &ground_truth, &ctx.window)?;
                    Ok((comp, final_rpe, score))
                })();
                let wall_time_s = started.elapsed().as_secs_f64();
                match outcome {
                    Ok((comp, final_rpe, score)) => ArmResult {
                        seed,
                        arm,
                        ssim: score,
                        initial_rpe,
                        final_rpe,
                        evaluations: comp.evaluations,
                        wall_time_s,
                        stack_checksum,
                        error: None,
                        image: Some(comp.image),
                        trace: Some(comp.trace),
                        model: Some(comp.model),
                    },
                    Err(e) => ArmResult {
                        seed,
                        arm,
                        ssim: f64::NAN,
                        initial_rpe,
                        final_rpe: f64::NAN,
                        evaluations: 0,
                        wall_time_s,
                        stack_checksum,
                        error: Some(e.to_string()),
                        image: None,
                        trace: None,
                        model: None,
                    },
                }
            })
            .collect();
        results.extend(cells);
        baselines.push(SeedBaseline {
            seed,
            motion,
            initial_rpe,
            stack_checksum,
            ground_truth: ground_truth.clone(),
            motion_free: motion_free.clone(),
            corrupted,
            motion_free_ssim,
            corrupted_ssim,
        });
    }
    Ok(BenchmarkReport {
        scenario: scenario.clone(),
        window: ctx.window,
        baselines,
        results,
    })
}

/// Aggregate of one arm over all seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmSummary {
    pub arm: IqmKind,
    pub runs: usize,
    pub failures: usize,
    pub median_ssim: Option<f64>,
    pub median_final_rpe: Option<f64>,
    /// Seeds whose final RPE is below half the initial RPE.
    pub halved: usize,
}

impl BenchmarkReport {
    pub fn arm_results(&self, arm: IqmKind) -> impl Iterator<Item = &ArmResult> {
        self.results.iter().filter(move |r| r.arm == arm)
    }

    pub fn summarize(&self, arm: IqmKind) -> ArmSummary {
        let cells: Vec<&ArmResult> = self.arm_results(arm).collect();
        let ok: Vec<&&ArmResult> = cells.iter().filter(|r| r.succeeded()).collect();
        let ssims: Vec<f64> = ok.iter().map(|r| r.ssim).collect();
        let rpes: Vec<f64> = ok.iter().map(|r| r.final_rpe).collect();
        ArmSummary {
            arm,
            runs: cells.len(),
            failures: cells.len() - ok.len(),
            median_ssim: median(&ssims),
            median_final_rpe: median(&rpes),
            halved: ok.iter().filter(|r| r.final_rpe < 0.5 * r.initial_rpe).count(),
        }
    }

    /// One row per (seed, arm) plus the per-seed baselines.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "scenario,seed,arm,ssim,initial_rpe_mm,final_rpe_mm,evaluations,wall_time_s,\
             motion_free_ssim,corrupted_ssim,stack_crc32,error\n",
        );
        for r in &self.results {
            let base = self.baselines.iter().find(|b| b.seed == r.seed);
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6},{},{:.3},{:.6},{:.6},{:08x},{}",
                self.scenario.name.as_str(),
                r.seed,
                r.arm.name(),
                r.ssim,
                r.initial_rpe,
                r.final_rpe,
                r.evaluations,
                r.wall_time_s,
                base.map_or(f64::NAN, |b| b.motion_free_ssim),
                base.map_or(f64::NAN, |b| b.corrupted_ssim),
                r.stack_checksum,
                r.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
            );
        }
        out
    }

    pub fn summary_text(&self) -> String {
        let s = &self.scenario;
        let mut out = String::new();
        let _ = writeln!(out, "scenario: {}", s.name.as_str());
        let _ = writeln!(
            out,
            "generation nodes: {}  compensation nodes: {}  target rpe: {} mm  seeds: {:?}",
            s.gen_nodes, s.comp_nodes, s.target_rpe, s.seeds
        );
        let _ = writeln!(
            out,
            "ssim computed after display window [{}, {}] (display units = 1000 x attenuation)",
            self.window.lo, self.window.hi
        );
        if let Some(b) = self.baselines.first() {
            let _ = writeln!(out, "motion-free reconstruction ssim: {:.4}", b.motion_free_ssim);
        }
        let corrupted: Vec<f64> = self.baselines.iter().map(|b| b.corrupted_ssim).collect();
        if let Some(m) = median(&corrupted) {
            let _ = writeln!(out, "motion-affected median ssim: {m:.4}");
        }
        for arm in &s.arms {
            let a = self.summarize(*arm);
            let _ = writeln!(
                out,
                "{:<16} median ssim {}  median final rpe {} mm  rpe halved in {}/{}  failures {}",
                arm.name(),
                fmt_opt(a.median_ssim),
                fmt_opt(a.median_final_rpe),
                a.halved,
                a.runs,
                a.failures
            );
        }
        out
    }

    /// Gray-level panel per seed: ground truth, motion-affected, then one
    /// column per arm. Returns (width, height, pixels).
    pub fn panel(&self) -> (u32, u32, Vec<u8>) {
        let cols = 2 + self.scenario.arms.len();
        let size = self.baselines.first().map_or(0, |b| b.ground_truth.size());
        let (w, h) = (cols * size, self.baselines.len() * size);
        let mut px = vec![0u8; w * h];
        for (row, base) in self.baselines.iter().enumerate() {
            let mut tiles: Vec<Option<&SliceImage>> = vec![Some(&base.ground_truth), Some(&base.corrupted)];
            for arm in &self.scenario.arms {
                tiles.push(
                    self.results
                        .iter()
                        .find(|r| r.seed == base.seed && r.arm == *arm)
                        .and_then(|r| r.image.as_ref()),
                );
            }
            for (col, tile) in tiles.into_iter().enumerate() {
                let Some(img) = tile else { continue };
                let shown = self.window.apply(img);
                for r in 0..size {
                    for c in 0..size {
                        let v = (shown.get(r, c).clamp(0.0, 1.0) * 255.0).round() as u8;
                        px[(row * size + r) * w + col * size + c] = v;
                    }
                }
            }
        }
        (w as u32, h as u32, px)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}
