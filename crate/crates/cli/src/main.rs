//! `cbct-af`: simulate, reconstruct and autofocus-compensate rigid head
//! motion in circular cone-beam CT.

mod config;
mod manifest;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cbct_motion::autofocus::{compensate, CompensationProblem};
use cbct_motion::eval::{run_benchmark, BenchmarkContext, ScenarioName};
use cbct_motion::geometry::make_circular_trajectory;
use cbct_motion::io;
use cbct_motion::iqm::{Iqm, IqmKind, OracleRef};
use cbct_motion::motion::{
    random_motion, spline_to_trajectory, MotionRequest, MotionTrajectory, RpeEvaluator, SplineMotionModel,
};
use cbct_motion::phantom::{forward_project, render_slice, Phantom};
use cbct_motion::regressor::{self, DatasetSpec, RegressorModel, TrainingSample};

use config::ToolkitConfig;
use manifest::Recorder;

#[derive(Parser, Debug)]
#[command(name = "cbct-af", version, about = "Rigid motion simulation and autofocus compensation for cone-beam CT")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Caps the number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Forward project the phantom, clean and motion-corrupted.
    Simulate {
        /// Spline motion model to apply instead of a random one.
        #[arg(long)]
        motion: Option<PathBuf>,
    },
    /// Reconstruct the central slice of a stack.
    Reconstruct {
        #[arg(long)]
        stack: PathBuf,
        /// Per-view motion to compensate; none when omitted.
        #[arg(long)]
        trajectory: Option<PathBuf>,
        #[arg(long, default_value = "slice")]
        name: String,
    },
    /// Synthesize a labelled regressor training set.
    GenDataset,
    /// Train the RPE regressor on a dataset manifest.
    Train {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Estimate and compensate motion in a stack by autofocus.
    Compensate {
        #[arg(long)]
        stack: PathBuf,
        /// Regressor for the learned metric.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Metric to minimize; the configured one when omitted.
        #[arg(long)]
        iqm: Option<String>,
        /// Ground-truth trajectory, used for tracing and the oracle metric.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Run a seeded compensation benchmark.
    Benchmark {
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Print the reprojection error of a trajectory.
    Rpe {
        #[arg(long)]
        trajectory: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::Reconstruct { .. } => "reconstruct",
            Command::GenDataset => "gen-dataset",
            Command::Train { .. } => "train",
            Command::Compensate { .. } => "compensate",
            Command::Benchmark { .. } => "benchmark",
            Command::Rpe { .. } => "rpe",
        }
    }
}

/// A runtime error attributed to the module that raised it.
struct Failure {
    module: &'static str,
    error: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error in {}: {:#}", self.module, self.error)
    }
}

trait InModule<T> {
    fn module(self, module: &'static str) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> InModule<T> for Result<T, E> {
    fn module(self, module: &'static str) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            module,
            error: e.into(),
        })
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let first = e.to_string().lines().next().unwrap_or("invalid usage").to_string();
            eprintln!("{first}");
            eprintln!("hint: run `cbct-af --help` for usage");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let mut config = match &cli.global.config {
        Some(path) => ToolkitConfig::load(path).module("config")?,
        None => ToolkitConfig::default(),
    };
    if let Some(seed) = cli.global.seed {
        config.seed = seed;
    }
    if let Some(dir) = &cli.global.output_dir {
        config.output_dir.clone_from(dir);
    }
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .module("cli")?;
    }
    std::fs::create_dir_all(&config.output_dir).module("cli")?;
    let arguments: Vec<String> = std::env::args().skip(1).collect();
    let mut rec = Recorder::new(cli.command.name(), arguments);
    if let Some(path) = &cli.global.config {
        rec.input(path);
    }
    if let Some(path) = &config.phantom {
        rec.input(path);
    }
    match &cli.command {
        Command::Simulate { motion } => simulate(&config, motion.as_deref(), &mut rec),
        Command::Reconstruct {
            stack,
            trajectory,
            name,
        } => reconstruct(&config, stack, trajectory.as_deref(), name, &mut rec),
        Command::GenDataset => gen_dataset(&config, &mut rec),
        Command::Train { dataset } => train(&config, dataset, &mut rec),
        Command::Compensate {
            stack,
            model,
            iqm,
            truth,
        } => compensate_cmd(&config, stack, model.as_deref(), iqm.as_deref(), truth.as_deref(), &mut rec),
        Command::Benchmark { scenario, model } => benchmark(&config, scenario, model.as_deref(), &mut rec),
        Command::Rpe { trajectory } => rpe(&config, trajectory, &mut rec),
    }?;
    rec.write(&config).module("cli")?;
    Ok(())
}

fn out(config: &ToolkitConfig, name: &str) -> PathBuf {
    config.output_dir.join(name)
}

fn load_phantom(config: &ToolkitConfig) -> Result<Phantom, Failure> {
    let phantom = config.phantom().module("phantom")?;
    phantom.check_fits(&config.geometry).module("phantom")?;
    Ok(phantom)
}

fn simulate(config: &ToolkitConfig, motion: Option<&Path>, rec: &mut Recorder) -> Outcome {
    let phantom = load_phantom(config)?;
    let g = &config.geometry;
    let matrices = make_circular_trajectory(g).module("geometry")?;
    let model = match motion {
        Some(path) => {
            rec.input(path);
            io::read_motion_model(path).module("motion")?
        }
        None => {
            let evaluator = RpeEvaluator::from_geometry(g, &config.rpe).module("motion")?;
            random_motion(
                &MotionRequest {
                    n_views: g.n_views,
                    n_nodes: config.motion.n_nodes,
                    target_rpe: config.motion.target_rpe,
                    active_fraction: config.motion.active_fraction,
                    seed: config.seed,
                },
                &evaluator,
            )
            .module("motion")?
        }
    };
    let trajectory = spline_to_trajectory(&model, g.n_views).module("motion")?;
    let clean = forward_project(&phantom, &matrices, g, None).module("phantom")?;
    let corrupted = forward_project(&phantom, &matrices, g, Some(&trajectory)).module("phantom")?;
    io::write_stack(&rec.output(&out(config, "clean.cbps")), &clean).module("io")?;
    rec.output(&io::geometry_sidecar(&out(config, "clean.cbps")));
    io::write_stack(&rec.output(&out(config, "corrupted.cbps")), &corrupted).module("io")?;
    rec.output(&io::geometry_sidecar(&out(config, "corrupted.cbps")));
    io::write_motion_model(&rec.output(&out(config, "motion.toml")), &model).module("io")?;
    io::write_trajectory(&rec.output(&out(config, "trajectory.csv")), &trajectory).module("io")?;
    io::write_matrices(&rec.output(&out(config, "matrices.csv")), &matrices).module("io")?;
    let gt = render_slice(&phantom, config.recon.grid_size, config.recon.fov_mm, 0.0).module("phantom")?;
    io::write_slice(&rec.output(&out(config, "ground_truth.cbsl")), &gt).module("io")?;
    write_preview(config, &gt, "ground_truth.pgm", rec)?;
    Ok(())
}

fn write_preview(
    config: &ToolkitConfig,
    img: &cbct_motion::image::SliceImage,
    name: &str,
    rec: &mut Recorder,
) -> Outcome {
    let scale = cbct_motion::image::DISPLAY_UNITS_PER_ATTENUATION;
    let (lo, hi) = (config.display.lo / scale, config.display.hi / scale);
    io::write_pgm(&rec.output(&out(config, name)), img, lo, hi).module("io")
}

fn read_stack(path: &Path, rec: &mut Recorder) -> Result<cbct_motion::phantom::ProjectionStack, Failure> {
    rec.input(path);
    rec.input(&io::geometry_sidecar(path));
    io::read_stack(path).module("io")
}

fn reconstruct(
    config: &ToolkitConfig,
    stack_path: &Path,
    trajectory: Option<&Path>,
    name: &str,
    rec: &mut Recorder,
) -> Outcome {
    let stack = read_stack(stack_path, rec)?;
    let g = stack.geometry();
    let matrices = make_circular_trajectory(g).module("geometry")?;
    let motion = match trajectory {
        Some(p) => {
            rec.input(p);
            io::read_trajectory(p).module("io")?
        }
        None => MotionTrajectory::identity(g.n_views),
    };
    let img = config
        .recon
        .backprojector(&stack, &matrices)
        .and_then(|bp| bp.reconstruct(&motion))
        .module("recon")?;
    io::write_slice(&rec.output(&out(config, &format!("{name}.cbsl"))), &img).module("io")?;
    write_preview(config, &img, &format!("{name}.pgm"), rec)
}

fn gen_dataset(config: &ToolkitConfig, rec: &mut Recorder) -> Outcome {
    let base = load_phantom(config)?;
    let phantoms: Vec<Phantom> = config.dataset.phantom_variants.iter().map(|s| base.variant(*s)).collect();
    let spec = DatasetSpec {
        n_trajectories_per_phantom: config.dataset.n_trajectories_per_phantom,
        rpe_range: config.motion.rpe_range,
        seed: config.seed,
        n_nodes: config.motion.n_nodes,
        active_fraction: config.motion.active_fraction,
    };
    let samples = regressor::generate_dataset(&phantoms, &spec, &config.geometry, &config.recon, &config.rpe)
        .module("regressor")?;
    let dir = out(config, "dataset");
    let mut entries = Vec::with_capacity(samples.len());
    for (k, s) in samples.iter().enumerate() {
        let image = PathBuf::from(format!("img_{k:05}.cbsl"));
        let trajectory = PathBuf::from(format!("motion_{k:05}.toml"));
        io::write_slice(&rec.output(&dir.join(&image)), &s.image).module("io")?;
        io::write_motion_model(&rec.output(&dir.join(&trajectory)), &s.motion).module("io")?;
        entries.push(io::DatasetEntry {
            image,
            rpe_label: s.rpe_label,
            seed: s.seed,
            trajectory,
        });
    }
    io::write_dataset_manifest(&rec.output(&dir.join("manifest.csv")), &entries).module("io")?;
    println!("{} samples written to {}", samples.len(), dir.display());
    Ok(())
}

fn train(config: &ToolkitConfig, manifest: &Path, rec: &mut Recorder) -> Outcome {
    rec.input(manifest);
    let entries = io::read_dataset_manifest(manifest).module("io")?;
    let mut samples = Vec::with_capacity(entries.len());
    for e in &entries {
        let motion: SplineMotionModel = io::read_motion_model(&e.trajectory).module("io")?;
        samples.push(TrainingSample {
            image: io::read_slice(&e.image).module("io")?,
            rpe_label: e.rpe_label,
            seed: e.seed,
            phantom_index: 0,
            motion,
        });
    }
    let mut train_config = config.regressor.clone();
    train_config.seed = config.seed;
    let (model, history) = regressor::train(&samples, &train_config).module("regressor")?;
    model.save(&rec.output(&out(config, "model.cbrm"))).module("regressor")?;
    let mut csv = String::from("epoch,train_mse,val_mse\n");
    csv.push_str(&format!("0,,{:e}\n", history.initial_val_loss));
    for e in &history.epochs {
        csv.push_str(&format!("{},{:e},{:e}\n", e.epoch, e.train_loss, e.val_loss));
    }
    let hist_path = rec.output(&out(config, "training_history.csv"));
    std::fs::write(&hist_path, csv).module("io")?;
    println!(
        "best validation mse {:.6} at epoch {} (initial {:.6})",
        history.best_val_loss, history.best_epoch, history.initial_val_loss
    );
    Ok(())
}

fn load_model(path: Option<&Path>, rec: &mut Recorder) -> Result<Option<RegressorModel>, Failure> {
    path.map(|p| {
        rec.input(p);
        regressor::load_model(p).module("regressor")
    })
    .transpose()
}

fn compensate_cmd(
    config: &ToolkitConfig,
    stack_path: &Path,
    model_path: Option<&Path>,
    iqm: Option<&str>,
    truth_path: Option<&Path>,
    rec: &mut Recorder,
) -> Outcome {
    let stack = read_stack(stack_path, rec)?;
    let g = stack.geometry().clone();
    let matrices = make_circular_trajectory(&g).module("geometry")?;
    let kind = match iqm {
        Some(name) => IqmKind::parse(name).module("iqm")?,
        None => config.autofocus.iqm,
    };
    let model = load_model(model_path, rec)?;
    let truth = truth_path
        .map(|p| {
            rec.input(p);
            io::read_trajectory(p).module("io")
        })
        .transpose()?;
    let evaluator = RpeEvaluator::from_geometry(&g, &config.rpe).module("motion")?;
    let oracle = truth.as_ref().map(|t| OracleRef {
        evaluator: &evaluator,
        truth: t,
    });
    let iqm = Iqm::resolve(kind, config.autofocus.entropy_bins, model.as_ref(), oracle).module("iqm")?;
    let problem = CompensationProblem {
        stack: &stack,
        matrices: &matrices,
        n_comp_nodes: config.autofocus.comp_nodes,
        iqm,
        recon: config.recon,
        ground_truth: oracle,
    };
    let result = compensate(&problem, &config.autofocus.simplex).module("autofocus")?;
    io::write_slice(&rec.output(&out(config, "compensated.cbsl")), &result.image).module("io")?;
    write_preview(config, &result.image, "compensated.pgm", rec)?;
    io::write_motion_model(&rec.output(&out(config, "estimated_motion.toml")), &result.model).module("io")?;
    let estimate = spline_to_trajectory(&result.model, g.n_views).module("motion")?;
    io::write_trajectory(&rec.output(&out(config, "estimated_trajectory.csv")), &estimate).module("io")?;
    std::fs::write(rec.output(&out(config, "trace.csv")), result.trace.to_csv()).module("io")?;
    println!(
        "{}: objective {:.6} after {} evaluations ({})",
        kind.name(),
        result.objective,
        result.evaluations,
        result.stop
    );
    Ok(())
}

fn benchmark(config: &ToolkitConfig, scenario: &str, model_path: Option<&Path>, rec: &mut Recorder) -> Outcome {
    let name = ScenarioName::parse(scenario).module("eval")?;
    let scenario = config.scenario(name);
    let phantom = load_phantom(config)?;
    let model = load_model(model_path, rec)?;
    let ctx = BenchmarkContext {
        phantom: &phantom,
        geometry: &config.geometry,
        recon: config.recon,
        rpe: &config.rpe,
        simplex: &config.autofocus.simplex,
        model: model.as_ref(),
        window: config.display,
    };
    let report = run_benchmark(&scenario, &ctx).module("eval")?;
    let prefix = scenario.name.as_str();
    std::fs::write(rec.output(&out(config, &format!("{prefix}_report.csv"))), report.to_csv()).module("io")?;
    let summary = report.summary_text();
    std::fs::write(rec.output(&out(config, &format!("{prefix}_summary.txt"))), &summary).module("io")?;
    let (w, h, px) = report.panel();
    if w > 0 && h > 0 {
        io::write_gray_png(&rec.output(&out(config, &format!("{prefix}_panel.png"))), w, h, &px).module("io")?;
    }
    for r in &report.results {
        if let Some(trace) = &r.trace {
            let path = out(config, &format!("{prefix}_trace_seed{}_{}.csv", r.seed, r.arm.name()));
            std::fs::write(rec.output(&path), trace.to_csv()).module("io")?;
        }
    }
    print!("{summary}");
    Ok(())
}

fn rpe(config: &ToolkitConfig, trajectory: &Path, rec: &mut Recorder) -> Outcome {
    rec.input(trajectory);
    let traj = io::read_trajectory(trajectory).module("io")?;
    let mut geometry = config.geometry.clone();
    if traj.len() != geometry.n_views {
        return Err(Failure {
            module: "motion",
            error: anyhow::anyhow!(
                "trajectory has {} views, configured geometry has {}",
                traj.len(),
                geometry.n_views
            ),
        });
    }
    geometry.n_views = traj.len();
    let evaluator = RpeEvaluator::from_geometry(&geometry, &config.rpe).module("motion")?;
    let value = evaluator.rpe(&traj).module("motion")?;
    println!("{value:?}");
    Ok(())
}
