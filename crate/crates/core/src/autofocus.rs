//! Autofocus motion compensation: a Nelder-Mead search over compensation
//! spline node angles minimizing an image-quality metric of the
//! motion-compensated reconstruction.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ProjectionMatrix;
use crate::image::SliceImage;
use crate::iqm::{evaluate_iqm, Iqm, OracleRef};
use crate::motion::{spline_to_trajectory, MotionTrajectory, SplineMotionModel};
use crate::phantom::ProjectionStack;
use crate::recon::ReconSettings;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimplexConfig {
    pub reflection: f64,
    pub expansion: f64,
    pub contraction: f64,
    pub shrink: f64,
    /// Offset of the initial vertices along each coordinate.
    pub initial_step: f64,
    pub max_evaluations: usize,
    pub x_tolerance: f64,
    pub f_tolerance: f64,
    pub restarts: usize,
}

impl Default for SimplexConfig {
    fn default() -> Self {
        Self {
            reflection: 1.0,
            expansion: 2.0,
            contraction: 0.5,
            shrink: 0.5,
            initial_step: 0.5,
            max_evaluations: 2000,
            x_tolerance: 1e-3,
            f_tolerance: 1e-6,
            restarts: 1,
        }
    }
}

impl SimplexConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.reflection > 0.0
            && self.expansion > 1.0
            && self.expansion > self.reflection
            && self.contraction > 0.0
            && self.contraction < 1.0
            && self.shrink > 0.0
            && self.shrink < 1.0;
        if !ok {
            return Err(Error::Config(
                "simplex coefficients need reflection > 0, expansion > max(1, reflection), \
                 contraction and shrink in (0, 1)"
                    .into(),
            ));
        }
        if !(self.initial_step > 0.0 && self.x_tolerance > 0.0 && self.f_tolerance > 0.0) {
            return Err(Error::Config("initial_step and tolerances must be positive".into()));
        }
        if self.max_evaluations == 0 {
            return Err(Error::Config("max_evaluations must be positive".into()));
        }
        Ok(())
    }
}

/// One objective evaluation as consumed by the optimizer.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRecord {
    pub evaluation: usize,
    pub x: Vec<f64>,
    pub f: f64,
    /// RPE of the candidate against the ground truth, when attached.
    pub true_rpe: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct IterationTrace {
    pub records: Vec<TraceRecord>,
}

impl IterationTrace {
    /// Best objective seen up to and including each evaluation.
    pub fn incumbent(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.records
            .iter()
            .map(|r| {
                best = best.min(r.f);
                best
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("evaluation,f,true_rpe");
        let dim = self.records.first().map_or(0, |r| r.x.len());
        for k in 0..dim {
            out.push_str(&format!(",node_{k}"));
        }
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!("{},{:e},", r.evaluation, r.f));
            if let Some(t) = r.true_rpe {
                out.push_str(&format!("{t:e}"));
            }
            for x in &r.x {
                out.push_str(&format!(",{x:e}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    XTolerance,
    FTolerance,
    MaxEvaluations,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::XTolerance => "x_tolerance",
            StopReason::FTolerance => "f_tolerance",
            StopReason::MaxEvaluations => "max_evaluations",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evaluations: usize,
    pub stop: StopReason,
    pub trace: IterationTrace,
}

struct Budgeted<'f, F> {
    objective: &'f mut F,
    max: usize,
    trace: IterationTrace,
}

impl<F: FnMut(&[f64]) -> Result<f64>> Budgeted<'_, F> {
    /// `None` once the evaluation budget is spent.
    fn eval(&mut self, x: &[f64]) -> Result<Option<f64>> {
        if self.trace.records.len() >= self.max {
            return Ok(None);
        }
        let f = (self.objective)(x)?;
        if f.is_nan() {
            return Err(Error::Optimization(format!("objective is NaN at {x:?}")));
        }
        self.trace.records.push(TraceRecord {
            evaluation: self.trace.records.len(),
            x: x.to_vec(),
            f,
            true_rpe: None,
        });
        Ok(Some(f))
    }
}

struct Vertex {
    x: Vec<f64>,
    f: f64,
}

enum Outcome {
    Converged(StopReason),
    OutOfBudget,
}

/// Minimizes `objective` from `x0`. The initial simplex is `x0` plus
/// `initial_step` along each coordinate. Each restart rebuilds the simplex
/// around the incumbent. Vertices with equal objective values keep their
/// order, so the lower index wins ties.
pub fn nelder_mead<F>(mut objective: F, x0: &[f64], config: &SimplexConfig) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    config.validate()?;
    if x0.is_empty() {
        return Err(Error::Config("cannot optimize over an empty vector".into()));
    }
    let mut budget = Budgeted {
        objective: &mut objective,
        max: config.max_evaluations,
        trace: IterationTrace::default(),
    };
    let f0 = budget.eval(x0)?.expect("budget is positive");
    if !f0.is_finite() {
        return Err(Error::Optimization(format!("objective is not finite at the start point {x0:?}")));
    }
    let mut best = Vertex { x: x0.to_vec(), f: f0 };
    let mut stop = StopReason::MaxEvaluations;
    for _ in 0..=config.restarts {
        let start = best.x.clone();
        match run_simplex(&mut budget, &start, config, &mut best)? {
            Outcome::Converged(reason) => stop = reason,
            Outcome::OutOfBudget => {
                stop = StopReason::MaxEvaluations;
                break;
            }
        }
    }
    Ok(Minimum {
        x: best.x,
        f: best.f,
        evaluations: budget.trace.records.len(),
        stop,
        trace: budget.trace,
    })
}

fn run_simplex<F: FnMut(&[f64]) -> Result<f64>>(
    budget: &mut Budgeted<'_, F>,
    start: &[f64],
    c: &SimplexConfig,
    best: &mut Vertex,
) -> Result<Outcome> {
    let n = start.len();
    let mut simplex = Vec::with_capacity(n + 1);
    // the start is always the incumbent, whose value is known
    simplex.push(Vertex {
        x: start.to_vec(),
        f: best.f,
    });
    for k in 0..n {
        let mut x = start.to_vec();
        x[k] += c.initial_step;
        let Some(f) = budget.eval(&x)? else {
            return Ok(Outcome::OutOfBudget);
        };
        if !f.is_finite() {
            return Err(Error::Optimization(format!("objective is not finite at initial vertex {x:?}")));
        }
        simplex.push(Vertex { x, f });
    }

    macro_rules! eval_or_stop {
        ($x:expr) => {
            match budget.eval(&$x)? {
                Some(f) => f,
                None => {
                    record_best(&simplex, best);
                    return Ok(Outcome::OutOfBudget);
                }
            }
        };
    }

    loop {
        simplex.sort_by(|a, b| a.f.total_cmp(&b.f));
        record_best(&simplex, best);
        let diameter = simplex[1..]
            .iter()
            .flat_map(|v| v.x.iter().zip(&simplex[0].x).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if diameter <= c.x_tolerance {
            return Ok(Outcome::Converged(StopReason::XTolerance));
        }
        let spread = simplex[1..].iter().map(|v| (v.f - simplex[0].f).abs()).fold(0.0, f64::max);
        if spread <= c.f_tolerance {
            return Ok(Outcome::Converged(StopReason::FTolerance));
        }

        let mut centroid = vec![0.0; n];
        for v in &simplex[..n] {
            for (c, x) in centroid.iter_mut().zip(&v.x) {
                *c += x / n as f64;
            }
        }
        let toward = |t: f64, p: &[f64]| -> Vec<f64> {
            centroid.iter().zip(p).map(|(c, x)| c + t * (x - c)).collect()
        };
        let worst_f = simplex[n].f;
        let xr = toward(-c.reflection, &simplex[n].x);
        let fr = eval_or_stop!(xr);

        if fr < simplex[0].f {
            let xe = toward(-c.reflection * c.expansion, &simplex[n].x);
            let fe = eval_or_stop!(xe);
            simplex[n] = if fe < fr { Vertex { x: xe, f: fe } } else { Vertex { x: xr, f: fr } };
            continue;
        }
        if fr < simplex[n - 1].f {
            simplex[n] = Vertex { x: xr, f: fr };
            continue;
        }
        let accepted = if fr < worst_f {
            let xc = toward(-c.reflection * c.contraction, &simplex[n].x);
            let fc = eval_or_stop!(xc);
            (fc <= fr).then_some(Vertex { x: xc, f: fc })
        } else {
            let xcc = toward(c.contraction, &simplex[n].x);
            let fcc = eval_or_stop!(xcc);
            (fcc < worst_f).then_some(Vertex { x: xcc, f: fcc })
        };
        match accepted {
            Some(v) => simplex[n] = v,
            None => {
                let anchor = simplex[0].x.clone();
                for k in 1..=n {
                    let x: Vec<f64> = anchor
                        .iter()
                        .zip(&simplex[k].x)
                        .map(|(a, x)| a + c.shrink * (x - a))
                        .collect();
                    let f = eval_or_stop!(x);
                    simplex[k] = Vertex { x, f };
                }
            }
        }
    }
}

fn record_best(simplex: &[Vertex], best: &mut Vertex) {
    if let Some(v) = simplex.iter().min_by(|a, b| a.f.total_cmp(&b.f)) {
        if v.f < best.f {
            best.x.clone_from(&v.x);
            best.f = v.f;
        }
    }
}

/// Everything one compensation run needs. `ground_truth` is only read to
/// annotate the trace after optimization.
#[derive(Clone, Copy, Debug)]
pub struct CompensationProblem<'a> {
    pub stack: &'a ProjectionStack,
    pub matrices: &'a [ProjectionMatrix],
    pub n_comp_nodes: usize,
    pub iqm: Iqm<'a>,
    pub recon: ReconSettings,
    pub ground_truth: Option<OracleRef<'a>>,
}

#[derive(Clone, Debug)]
pub struct Compensation {
    pub model: SplineMotionModel,
    pub image: SliceImage,
    pub objective: f64,
    pub evaluations: usize,
    pub stop: StopReason,
    pub trace: IterationTrace,
}

/// Quantization grid of the objective cache, in degrees.
const CACHE_GRID_DEG: f64 = 1e-6;

/// Estimates the patient motion by minimizing the metric over the node
/// angles of an equispaced compensation spline, starting from no motion.
pub fn compensate(problem: &CompensationProblem<'_>, config: &SimplexConfig) -> Result<Compensation> {
    if problem.n_comp_nodes < 2 {
        return Err(Error::Config("compensation needs at least 2 spline nodes".into()));
    }
    let n_views = problem.stack.geometry().n_views;
    let backprojector = problem.recon.backprojector(problem.stack, problem.matrices)?;
    let iqm = problem.iqm;
    let model_for = |v: &[f64]| SplineMotionModel::equispaced(n_views, v.to_vec());
    let trajectory_for = |v: &[f64]| spline_to_trajectory(&model_for(v), n_views);

    let mut cache: HashMap<Vec<i64>, f64> = HashMap::new();
    let objective = |v: &[f64]| -> Result<f64> {
        let key: Vec<i64> = v.iter().map(|x| (x / CACHE_GRID_DEG).round() as i64).collect();
        if let Some(f) = cache.get(&key) {
            return Ok(*f);
        }
        let traj = trajectory_for(v)?;
        let img = backprojector
            .reconstruct(&traj)
            .map_err(|e| Error::Optimization(format!("reconstruction failed for candidate {v:?}: {e}")))?;
        let f = evaluate_iqm(&iqm, &img, &traj)?;
        cache.insert(key, f);
        Ok(f)
    };
    let x0 = vec![0.0; problem.n_comp_nodes];
    let mut result = nelder_mead(objective, &x0, config)?;

    if let Some(gt) = problem.ground_truth {
        for r in &mut result.trace.records {
            r.true_rpe = Some(gt.evaluator.rpe_between(&trajectory_for(&r.x)?, gt.truth)?);
        }
    }
    let model = model_for(&result.x);
    let image = backprojector.reconstruct(&spline_to_trajectory(&model, n_views)?)?;
    Ok(Compensation {
        model,
        image,
        objective: result.f,
        evaluations: result.evaluations,
        stop: result.stop,
        trace: result.trace,
    })
}

/// Trajectory implied by a compensation result.
pub fn compensation_trajectory(comp: &Compensation, n_views: usize) -> Result<MotionTrajectory> {
    spline_to_trajectory(&comp.model, n_views)
}
