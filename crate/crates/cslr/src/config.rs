//! Run configuration: one TOML file describing the dataset, the model,
//! the objective, and the optimizer, plus the run-level knobs (seed,
//! dtype, epochs, batch size, directories).
//!
//! Every training or evaluation run echoes its effective configuration
//! into the run directory as `config.toml`, so any reported number can
//! be traced back to the exact settings that produced it. Two runs with
//! equal echoed configs and equal seeds produce equal metrics.

use crate::backbone::BackboneConfig;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::{lr_schedule, AdamParams, LossWeights};
use crate::temporal::{BilstmConfig, MstcnConfig};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Scalar type used for training and inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        })
    }
}

impl FromStr for Dtype {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(Error::Config(format!(
                "unknown dtype {other:?}; expected \"f32\" or \"f64\""
            ))),
        }
    }
}

/// Optimizer settings: Adam hyperparameters plus the milestone learning
/// rate schedule and optional gradient clipping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    #[serde(flatten)]
    pub adam: AdamParams,
    /// Epochs at which the learning rate is multiplied by `factor`.
    /// Must be strictly increasing.
    pub milestones: Vec<usize>,
    /// Multiplier applied at each milestone.
    pub factor: f64,
    /// Optional global-norm gradient clip threshold.
    pub clip_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            adam: AdamParams::default(),
            milestones: vec![200, 250],
            factor: 0.2,
            clip_norm: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        // Reuse the schedule's own milestone validation.
        lr_schedule(0, self.adam.lr, &self.milestones, self.factor)?;
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!(
                    "clip_norm must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }

    /// Adam hyperparameters effective at `epoch`, with the scheduled
    /// learning rate substituted in.
    pub fn params_at(&self, epoch: usize) -> Result<AdamParams> {
        let lr = lr_schedule(epoch, self.adam.lr, &self.milestones, self.factor)?;
        Ok(AdamParams { lr, ..self.adam })
    }
}

/// Complete description of one run. All sections have defaults, so a
/// config file only needs the fields it wants to change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dtype: Dtype,
    pub epochs: usize,
    pub batch_size: usize,
    /// Directory holding (or receiving) the dataset and its manifest.
    pub data_dir: PathBuf,
    /// Directory receiving the echoed config, logs, and checkpoints.
    pub run_dir: PathBuf,
    pub data: SyntheticSpec,
    pub backbone: BackboneConfig,
    pub mstcn: MstcnConfig,
    pub bilstm: BilstmConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dtype: Dtype::F32,
            epochs: 300,
            batch_size: 4,
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("runs/default"),
            data: SyntheticSpec::default(),
            backbone: BackboneConfig::default(),
            mstcn: MstcnConfig::default(),
            bilstm: BilstmConfig::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
        }
    }
}

impl RunConfig {
    /// Model architecture implied by this config; the vocabulary size
    /// comes from the dataset section.
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.data.vocab_size,
            backbone: self.backbone.clone(),
            mstcn: self.mstcn.clone(),
            bilstm: self.bilstm.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.data.validate()?;
        self.model().validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        if self.data.frame_size != self.backbone.image_size {
            return Err(Error::Config(format!(
                "dataset renders {}px frames but the backbone expects {}px",
                self.data.frame_size, self.backbone.image_size
            )));
        }
        if self.data.t_max > self.backbone.t_max {
            return Err(Error::Config(format!(
                "dataset may produce up to {} frames but the backbone \
                 capacity is {}",
                self.data.t_max, self.backbone.t_max
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        Ok(cfg)
    }

    /// Writes the echoed copy into `dir` as `config.toml` and returns
    /// its path. Serialization is deterministic, so equal configs echo
    /// to byte-identical files.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialization failed: {e}")))?;
        let path = dir.join("config.toml");
        std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_preserves_everything() {
        let mut cfg = RunConfig::default();
        cfg.seed = 7;
        cfg.dtype = Dtype::F64;
        cfg.optim.milestones = vec![10, 20, 30];
        cfg.optim.clip_norm = Some(5.0);
        cfg.backbone.tape_enabled = false;
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_fills_in_defaults() {
        let text = r#"
            seed = 3
            [backbone]
            t_max = 40
            [optim]
            lr = 0.002
        "#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.backbone.t_max, 40);
        assert_eq!(cfg.optim.adam.lr, 0.002);
        // Untouched fields keep their defaults.
        assert_eq!(cfg.batch_size, 4);
        assert_eq!(cfg.backbone.image_size, 32);
        assert_eq!(cfg.optim.adam.beta1, 0.9);
    }

    #[test]
    fn unknown_top_level_key_is_rejected() {
        let err = toml::from_str::<RunConfig>("epochz = 5\n").unwrap_err();
        assert!(err.to_string().contains("epochz"), "{err}");
    }

    #[test]
    fn frame_size_mismatch_is_caught() {
        let mut cfg = RunConfig::default();
        cfg.data.frame_size = 16;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("16") && msg.contains("32"), "{msg}");
    }

    #[test]
    fn capacity_mismatch_is_caught() {
        let mut cfg = RunConfig::default();
        cfg.backbone.t_max = 32;
        cfg.data.t_max = 64;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn scheduled_learning_rate_steps_at_milestones() {
        let mut cfg = OptimConfig::default();
        cfg.adam.lr = 1e-4;
        cfg.milestones = vec![20, 25, 30, 35];
        cfg.factor = 0.2;
        // Past two milestones: 1e-4 * 0.2^2 = 4e-6.
        let p = cfg.params_at(26).unwrap();
        assert!((p.lr - 4e-6).abs() < 1e-18, "lr {}", p.lr);
        // Other hyperparameters pass through untouched.
        assert_eq!(p.beta1, cfg.adam.beta1);
        assert_eq!(p.weight_decay, cfg.adam.weight_decay);
    }

    #[test]
    fn echo_is_byte_stable_and_reloadable() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let p1 = cfg.save(dir.path()).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let reloaded = RunConfig::load(&p1).unwrap();
        assert_eq!(reloaded, cfg);
        let p2 = cfg.save(dir.path()).unwrap();
        assert_eq!(std::fs::read(&p2).unwrap(), b1);
    }

    #[test]
    fn dtype_parses_both_ways() {
        assert_eq!("f32".parse::<Dtype>().unwrap(), Dtype::F32);
        assert_eq!("f64".parse::<Dtype>().unwrap(), Dtype::F64);
        assert!("f16".parse::<Dtype>().is_err());
        assert_eq!(Dtype::F64.to_string(), "f64");
    }
}
