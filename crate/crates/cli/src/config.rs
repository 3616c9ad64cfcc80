use std::path::{Path, PathBuf};

use mbct_core::controlnet::{ControlMode, ModelConfig};
use mbct_core::numerics::AdamWConfig;
use mbct_core::synthdata::CohortParams;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// One file drives data generation, training, prediction and evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub control: ControlConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 = final only).
    pub checkpoint_interval: usize,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    pub image_size: usize,
    pub subjects: usize,
    pub visits: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: String,
    pub output_csv: PathBuf,
    /// Base seed of the per-pair sampling streams.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub mode: ControlMode,
}


impl Default for TrainConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        Self {
            steps: 3000,
            batch: 4,
            lr: opt.lr,
            weight_decay: opt.weight_decay,
            clip_norm: opt.clip_norm,
            seed: 0,
            checkpoint_interval: 1000,
            out_dir: PathBuf::from("run"),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        let p = CohortParams::default();
        Self {
            path: PathBuf::from("data"),
            image_size: p.image_size,
            subjects: 200,
            visits: p.visits,
            seed: 0,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: "test".into(),
            output_csv: PathBuf::from("eval.csv"),
            seed: 0,
        }
    }
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            mode: ControlMode::Fourier,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Model settings with the control arm taken from `control.mode` and the
    /// frame size from `data.image_size`.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            control: self.control.mode,
            image_size: self.data.image_size,
            ..self.model.clone()
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.train.lr,
            weight_decay: self.train.weight_decay,
            clip_norm: self.train.clip_norm,
            ..AdamWConfig::default()
        }
    }

    pub fn cohort(&self) -> CohortParams {
        CohortParams {
            image_size: self.data.image_size,
            visits: self.data.visits,
            ..CohortParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        let t = &self.train;
        if t.steps == 0 || t.batch == 0 {
            return Err(CliError::invalid("train.steps and train.batch must be positive"));
        }
        if !(t.lr > 0.0) || !(t.weight_decay >= 0.0) || !(t.clip_norm > 0.0) {
            return Err(CliError::invalid(
                "train.lr and train.clip_norm must be positive, train.weight_decay non-negative",
            ));
        }
        if !matches!(self.eval.split.as_str(), "train" | "val" | "test") {
            return Err(CliError::invalid(format!(
                "eval.split must be train, val or test, got {:?}",
                self.eval.split
            )));
        }
        Ok(())
    }
}
