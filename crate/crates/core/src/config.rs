//! Run configuration shared by every pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optim::AdamWConfig;
use crate::probing::{ContextConfig, ProbeConfig};

/// Environment variable overriding `cache_dir`.
pub const CACHE_DIR_ENV: &str = "SCHEMALINK_CACHE_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub lambda: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { lambda: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Graph encoder width; the encoder output is projected when it differs.
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub sim_dim: usize,
    pub dec_hidden: usize,
    pub action_dim: usize,
    pub type_dim: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 128,
            heads: 4,
            layers: 2,
            ffn_dim: 256,
            sim_dim: 128,
            dec_hidden: 128,
            action_dim: 32,
            type_dim: 32,
            dropout: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mu: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beam: usize,
    /// Epochs between alignment snapshots; 0 keeps only the first and last.
    pub snapshot_every: usize,
    /// Epochs between train/dev exact-match evaluations; 0 evaluates only
    /// after the last epoch.
    pub eval_every: usize,
    /// Epochs between checkpoints; the last epoch is always saved.
    pub checkpoint_every: usize,
    pub freeze_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mu: 1.0,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            max_grad_norm: 5.0,
            warmup_ratio: 0.1,
            batch_size: 8,
            epochs: 100,
            seed: 42,
            beam: 4,
            snapshot_every: 10,
            eval_every: 0,
            checkpoint_every: 0,
            freeze_encoder: false,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            max_grad_norm: self.max_grad_norm,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    pub no_probe: bool,
    pub no_implicit: bool,
    pub no_reg: bool,
    pub exact_match: bool,
    pub no_linking: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoProbe,
    NoImplicit,
    NoReg,
    ExactMatch,
    NoLinking,
}

impl Ablations {
    pub fn set(&mut self, a: Ablation) {
        match a {
            Ablation::NoProbe => self.no_probe = true,
            Ablation::NoImplicit => self.no_implicit = true,
            Ablation::NoReg => self.no_reg = true,
            Ablation::ExactMatch => self.exact_match = true,
            Ablation::NoLinking => self.no_linking = true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let graph_modes = [self.no_probe, self.no_implicit, self.exact_match, self.no_linking];
        if graph_modes.iter().filter(|&&b| b).count() > 1 {
            return Err(Error::Config(
                "at most one of no_probe, no_implicit, exact_match, no_linking may be set".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    Columns,
    Tables,
    Schema,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub ckpt_dir: PathBuf,
    pub report_dir: PathBuf,
    pub encoder: ContextConfig,
    pub probe: ProbeConfig,
    pub fusion: FusionConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablations: Ablations,
    pub oracle: Option<OracleMode>,
    /// A schema item counts as predicted when its largest `Ã` entry exceeds
    /// this value.
    pub link_threshold: f64,
    /// Split files (without `.json`) in `data_dir`.
    pub train_split: String,
    pub dev_split: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: PathBuf::from("data"),
            cache_dir: PathBuf::from("cache"),
            ckpt_dir: PathBuf::from("ckpt"),
            report_dir: PathBuf::from("report"),
            encoder: ContextConfig::default(),
            probe: ProbeConfig::default(),
            fusion: FusionConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            ablations: Ablations::default(),
            oracle: None,
            link_threshold: 0.0,
            train_split: "examples".into(),
            dev_split: "dev".into(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            file: path.display().to_string(),
            record: None,
            message: e.to_string(),
        })
    }

    /// Applies the cache-root environment override, if set.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(CACHE_DIR_ENV) {
            self.cache_dir = PathBuf::from(dir);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.probe.validate()?;
        self.ablations.validate()?;
        if !(0.0..=1.0).contains(&self.fusion.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.fusion.lambda)));
        }
        let t = &self.train;
        if t.mu < 0.0 {
            return Err(Error::Config(format!("mu {} is negative", t.mu)));
        }
        if t.epochs == 0 || t.batch_size == 0 || t.beam == 0 {
            return Err(Error::Config("epochs, batch size and beam width must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&t.warmup_ratio) {
            return Err(Error::Config(format!("warmup ratio {} outside [0, 1]", t.warmup_ratio)));
        }
        let m = &self.model;
        if m.heads == 0 || m.dim % m.heads != 0 {
            return Err(Error::Config(format!("dim {} is not divisible by {} heads", m.dim, m.heads)));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", m.dropout)));
        }
        Ok(())
    }

    /// Fusion weight after ablations.
    pub fn effective_lambda(&self) -> f64 {
        if self.ablations.no_probe {
            0.0
        } else if self.ablations.no_implicit {
            1.0
        } else {
            self.fusion.lambda
        }
    }

    pub fn effective_mu(&self) -> f64 {
        if self.ablations.no_reg {
            0.0
        } else {
            self.train.mu
        }
    }

    /// Hash of everything that shapes a trained model. Paths, the oracle and
    /// decoding-time knobs are left out so evaluation variants share it.
    pub fn hash(&self) -> String {
        let mut view = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = view.as_object_mut() {
            for key in ["data_dir", "cache_dir", "ckpt_dir", "report_dir", "oracle", "link_threshold", "dev_split"] {
                obj.remove(key);
            }
            if let Some(train) = obj.get_mut("train").and_then(|t| t.as_object_mut()) {
                for key in ["beam", "eval_every", "checkpoint_every", "snapshot_every"] {
                    train.remove(key);
                }
            }
        }
        let digest = Sha256::digest(view.to_string().as_bytes());
        hex::encode(&digest[..8])
    }
}
