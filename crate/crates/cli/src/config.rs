//! Run configuration: `[section]` / `key = value` files parsed as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stcm_core::grid::GridConfig;
use stcm_core::losses::LossWeights;
use stcm_core::metrics::Selection;
use stcm_core::models::{ModelConfig, ModelKind};
use stcm_core::planner::PlannerConfig;
use stcm_core::training::TrainConfig;

use crate::error::{input, io_err, CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub count: usize,
    /// Probability that a scenario spawns movers crossing the ego lane.
    pub crossing_bias: f64,
    pub map_channels: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            count: 200,
            crossing_bias: 0.8,
            map_channels: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub eps: f64,
    pub min_pts: usize,
    /// Radius for multi-label intention assignment; defaults to `eps`.
    pub membership_eps: Option<f64>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            eps: 1.0,
            min_pts: 8,
            membership_eps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub kind: ModelKind,
    /// Write a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
    #[serde(flatten)]
    pub params: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            kind: ModelKind::Mscme,
            checkpoint_every: 0,
            params: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub selections: Vec<Selection>,
    /// Add the imitation head's trajectories to the sampled candidates.
    pub imitation_candidates: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            selections: vec![Selection::Top1, Selection::Top3, Selection::Top3PerCluster],
            imitation_candidates: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub dataset: Option<PathBuf>,
    pub intentions: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub planner: PlannerConfig,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Defaults everywhere except the mandatory seed.
    pub fn with_seed(seed: u64) -> Self {
        let mut c = RunConfig {
            seed,
            grid: GridConfig::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            planner: PlannerConfig::default(),
            cluster: ClusterConfig::default(),
            train: TrainSection::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        };
        c.resolve();
        c
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c: RunConfig = toml::from_str(text).map_err(|e| CliError::Input(format!("config: {e}")))?;
        c.resolve();
        Ok(c)
    }

    /// Reads, resolves and validates a config file; referenced paths must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let c = Self::parse(&text)?;
        c.validate()?;
        for p in [&c.paths.dataset, &c.paths.intentions, &c.paths.checkpoint].into_iter().flatten() {
            if !p.exists() {
                return input(format!("config references missing file {}", p.display()));
            }
        }
        Ok(c)
    }

    /// Propagates the grid into the model and the horizon into the final
    /// decoder width, and mirrors the run seed into training.
    pub fn resolve(&mut self) {
        self.model.grid = self.grid.clone();
        self.model.map_channels = self.data.map_channels;
        if let Some(last) = self.model.mscme_decoder_filters.last_mut() {
            *last = self.grid.horizon;
        }
        self.train.params.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.params.validate()?;
        if !(self.cluster.eps > 0.0) || self.cluster.min_pts == 0 {
            return input("cluster eps must be positive and min_pts at least 1");
        }
        if !(0.0..=1.0).contains(&self.data.crossing_bias) {
            return input("crossing_bias must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// Writes the resolved config next to a command's outputs.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let p = dir.join("config.resolved.toml");
        std::fs::write(&p, self.to_toml()).map_err(io_err(&p))
    }

    /// Seed of the `i`-th generated scenario for this run.
    pub fn scenario_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
    }

    pub fn model_kind(&self) -> ModelKind {
        self.train.kind
    }
}
