//! Run configuration: a sectioned `key = value` file (TOML) whose defaults
//! are the reference hyperparameters. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{default_context_dim, DprConfig, RoutingMode};
use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::train::{Precision, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub lookback: usize,
    pub horizon: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub mlp_expansion: f64,
    pub mlp_hidden: Option<usize>,
    pub dropout: f64,
    pub revin_affine: bool,
    /// Off builds the backbone without adapters.
    pub adapters: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            lookback: 96,
            horizon: 96,
            patch_len: 16,
            stride: 8,
            d_model: 256,
            n_blocks: 2,
            mlp_expansion: 2.0,
            mlp_hidden: None,
            dropout: 0.1,
            revin_affine: true,
            adapters: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DprSection {
    pub patterns: usize,
    /// Defaults to `max(16, d_model / 4)`.
    pub context_dim: Option<usize>,
    pub kernels: Vec<usize>,
    pub lambda_orth: f64,
    pub routing: RoutingMode,
    pub multiscale: bool,
    pub tau_init: f64,
    pub gamma_init: f64,
    pub identity_init: bool,
}

impl Default for DprSection {
    fn default() -> Self {
        let d = DprConfig::new(256);
        DprSection {
            patterns: d.patterns,
            context_dim: None,
            kernels: d.kernels,
            lambda_orth: d.lambda_orth,
            routing: d.routing,
            multiscale: d.multiscale,
            tau_init: d.tau_init,
            gamma_init: d.gamma_init,
            identity_init: d.identity_init,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub precision: Precision,
    pub grad_clip: Option<f64>,
    pub shard_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lr: t.lr,
            batch_size: t.batch_size,
            patience: t.patience,
            max_epochs: t.max_epochs,
            seed: t.seed,
            precision: t.precision,
            grad_clip: t.grad_clip,
            shard_size: t.shard_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<String>,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            path: None,
            split: [0.7, 0.1, 0.2],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub dpr: DprSection,
    pub train: TrainSection,
    pub data: DataSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train_config().validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// SHA-256 of the canonical serialisation.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_toml().as_bytes()).into()
    }

    pub fn dpr_config(&self) -> DprConfig {
        let d = self.model.d_model;
        let s = &self.dpr;
        DprConfig {
            patterns: s.patterns,
            hidden: d,
            context_dim: s.context_dim.unwrap_or_else(|| default_context_dim(d)),
            kernels: s.kernels.clone(),
            lambda_orth: s.lambda_orth,
            routing: s.routing,
            multiscale: s.multiscale,
            tau_init: s.tau_init,
            gamma_init: s.gamma_init,
            identity_init: s.identity_init,
        }
    }

    pub fn model_config(&self, channels: usize) -> Result<ModelConfig> {
        let m = &self.model;
        let cfg = ModelConfig {
            lookback: m.lookback,
            horizon: m.horizon,
            channels,
            patch_len: m.patch_len,
            stride: m.stride,
            d_model: m.d_model,
            n_blocks: m.n_blocks,
            mlp_expansion: m.mlp_expansion,
            mlp_hidden: m.mlp_hidden,
            dropout: m.dropout,
            revin_affine: m.revin_affine,
            dpr: m.adapters.then(|| self.dpr_config()),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            batch_size: t.batch_size,
            patience: t.patience,
            max_epochs: t.max_epochs,
            seed: t.seed,
            precision: t.precision,
            grad_clip: t.grad_clip,
            shard_size: t.shard_size,
            target_train_mse: None,
        }
    }
}
