//! Pipeline configuration, read from TOML.
//!
//! One global `seed` drives the model, the dataset and every training
//! stage; `seed` keys inside sections are overwritten on load so that a
//! config file has a single source of randomness.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use umslim::data::{SyntheticSpec, Task};
use umslim::moe::ConvertConfig;
use umslim::trace::TraceOptions;
use umslim::train::{EvalConfig, Stage, TrainConfig};
use umslim::ModelConfig;

/// Task-tagged calibration batch declared in the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSpec {
    pub id: String,
    pub task: Task,
    pub count: usize,
    /// Defaults to the global seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneSettings {
    /// Fraction of neurons or heads removed per layer.
    pub ratio: f64,
    /// Layers removed by depth pruning.
    pub depth_layers: usize,
    /// Keep the first and last generation layers intact.
    pub protect_edges: bool,
}

impl Default for PruneSettings {
    fn default() -> Self {
        Self {
            ratio: 0.5,
            depth_layers: 2,
            protect_edges: true,
        }
    }
}

/// Per-stage optimiser settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stages {
    pub pretrain: TrainConfig,
    pub dense_finetune: TrainConfig,
    pub expert_frozen: TrainConfig,
    pub moe_full: TrainConfig,
}

impl Default for Stages {
    fn default() -> Self {
        Self {
            pretrain: TrainConfig::for_stage(Stage::Pretrain),
            dense_finetune: TrainConfig::for_stage(Stage::DenseFinetune),
            expert_frozen: TrainConfig::for_stage(Stage::ExpertFrozen),
            moe_full: TrainConfig::for_stage(Stage::MoeFull),
        }
    }
}

impl Stages {
    pub fn get(&self, stage: Stage) -> &TrainConfig {
        match stage {
            Stage::Pretrain => &self.pretrain,
            Stage::DenseFinetune => &self.dense_finetune,
            Stage::ExpertFrozen => &self.expert_frozen,
            Stage::MoeFull => &self.moe_full,
        }
    }

    fn all_mut(&mut self) -> [(Stage, &mut TrainConfig); 4] {
        [
            (Stage::Pretrain, &mut self.pretrain),
            (Stage::DenseFinetune, &mut self.dense_finetune),
            (Stage::ExpertFrozen, &mut self.expert_frozen),
            (Stage::MoeFull, &mut self.moe_full),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Store root; the `UMSLIM_STORE` variable and `--store` override it.
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub data: SyntheticSpec,
    pub calibration: Vec<CalibrationSpec>,
    pub trace: TraceOptions,
    pub prune: PruneSettings,
    pub moe: ConvertConfig,
    pub train: Stages,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let data = SyntheticSpec::for_model(&model, 0);
        let calibration = vec![
            CalibrationSpec {
                id: "und".into(),
                task: Task::Understanding,
                count: 32,
                seed: None,
            },
            CalibrationSpec {
                id: "gen".into(),
                task: Task::Generation,
                count: 32,
                seed: None,
            },
        ];
        Self {
            seed: 0,
            output_dir: PathBuf::from("umslim-store"),
            model,
            data,
            calibration,
            trace: TraceOptions::default(),
            prune: PruneSettings::default(),
            moe: ConvertConfig::default(),
            train: Stages::default(),
            eval: EvalConfig::default(),
        }
        .resolved()
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing pipeline config")?;
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Propagates the global seed and fixes each stage section's tag.
    fn resolved(mut self) -> Self {
        let seed = self.seed;
        self.model.seed = seed;
        self.data.seed = seed;
        for (stage, t) in self.train.all_mut() {
            t.stage = stage;
            t.seed = seed;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.data.check_model(&self.model)?;
        let mut ids: Vec<&str> = self.calibration.iter().map(|c| c.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            bail!("calibration id {:?} declared twice", w[0]);
        }
        if let Some(c) = self.calibration.iter().find(|c| c.count == 0 || c.id.is_empty()) {
            bail!("calibration {:?} needs a non-empty id and a positive count", c.id);
        }
        if !(0.0..1.0).contains(&self.prune.ratio) {
            bail!("prune.ratio {} outside [0, 1)", self.prune.ratio);
        }
        self.moe.resolved_k()?;
        Ok(())
    }

    pub fn calibration(&self, id: &str) -> Result<&CalibrationSpec> {
        self.calibration
            .iter()
            .find(|c| c.id == id)
            .with_context(|| format!("no calibration {id:?} in the config"))
    }

    /// First calibration declared for `task`.
    pub fn calibration_for(&self, task: Task) -> Result<&CalibrationSpec> {
        self.calibration
            .iter()
            .find(|c| c.task == task)
            .with_context(|| format!("no {task} calibration in the config"))
    }

    /// Hex SHA-256 of the canonical JSON form, excluding the store location.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&canon).expect("config serialises");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}
