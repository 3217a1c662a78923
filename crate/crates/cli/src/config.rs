//! Strict TOML configuration of a toolkit run.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use cbct_motion::autofocus::SimplexConfig;
use cbct_motion::eval::ScenarioName;
use cbct_motion::geometry::ScanGeometry;
use cbct_motion::image::DisplayWindow;
use cbct_motion::iqm::IqmKind;
use cbct_motion::motion::RpeConfig;
use cbct_motion::phantom::Phantom;
use cbct_motion::recon::ReconSettings;
use cbct_motion::regressor::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionSection {
    pub n_nodes: usize,
    /// RPE of the corruption produced by `simulate`, in mm.
    pub target_rpe: f64,
    pub rpe_range: [f64; 2],
    pub active_fraction: f64,
}

impl Default for MotionSection {
    fn default() -> Self {
        Self {
            n_nodes: 10,
            target_rpe: 0.3,
            rpe_range: [0.0, 0.6],
            active_fraction: 0.33,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Phantom variant seeds the dataset is drawn from; 0 is the phantom
    /// itself.
    pub phantom_variants: Vec<u64>,
    pub n_trajectories_per_phantom: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            phantom_variants: (1..=12).collect(),
            n_trajectories_per_phantom: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutofocusSection {
    pub comp_nodes: usize,
    pub iqm: IqmKind,
    pub entropy_bins: usize,
    pub simplex: SimplexConfig,
}

impl Default for AutofocusSection {
    fn default() -> Self {
        Self {
            comp_nodes: 20,
            iqm: IqmKind::Learned,
            entropy_bins: cbct_motion::iqm::DEFAULT_BINS,
            simplex: SimplexConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSection {
    pub seeds: Vec<u64>,
    pub target_rpe: Option<f64>,
    pub arms: Option<Vec<IqmKind>>,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        Self {
            seeds: (1..=5).collect(),
            target_rpe: None,
            arms: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolkitConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Phantom definition file; the bundled head phantom when absent.
    pub phantom: Option<PathBuf>,
    pub geometry: ScanGeometry,
    pub recon: ReconSettings,
    pub motion: MotionSection,
    pub rpe: RpeConfig,
    pub dataset: DatasetSection,
    pub regressor: TrainConfig,
    pub autofocus: AutofocusSection,
    pub benchmark: BenchmarkSection,
    pub display: DisplayWindow,
}

impl Default for ToolkitConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            phantom: None,
            geometry: ScanGeometry::default(),
            recon: ReconSettings::default(),
            motion: MotionSection::default(),
            rpe: RpeConfig::default(),
            dataset: DatasetSection::default(),
            regressor: TrainConfig::default(),
            autofocus: AutofocusSection::default(),
            benchmark: BenchmarkSection::default(),
            display: DisplayWindow::default(),
        }
    }
}

impl ToolkitConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut config: ToolkitConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(p) = config.phantom.as_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if config.output_dir.is_relative() {
            config.output_dir = base.join(&config.output_dir);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.recon.validate()?;
        self.rpe.validate()?;
        self.regressor.validate()?;
        self.autofocus.simplex.validate()?;
        if let Some(p) = &self.phantom {
            if !p.is_file() {
                bail!("phantom file {} does not exist", p.display());
            }
        }
        if self.motion.n_nodes < 2 || self.autofocus.comp_nodes < 2 {
            bail!("spline node counts must be at least 2");
        }
        Ok(())
    }

    pub fn phantom(&self) -> Result<Phantom> {
        match &self.phantom {
            Some(p) => Ok(Phantom::load(p)?),
            None => Ok(Phantom::default_head()),
        }
    }

    #[cfg(test)]
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn scenario(&self, name: ScenarioName) -> cbct_motion::eval::BenchmarkScenario {
        let mut s = cbct_motion::eval::BenchmarkScenario::named(name);
        s.seeds.clone_from(&self.benchmark.seeds);
        if let Some(t) = self.benchmark.target_rpe {
            s.target_rpe = t;
        }
        if let Some(arms) = &self.benchmark.arms {
            s.arms.clone_from(arms);
        }
        s.active_fraction = self.motion.active_fraction;
        s
    }
}
