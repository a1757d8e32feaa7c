// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration: the model shape plus everything a training run needs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::AdamWConfig;
use crate::error::{Error, Result};
use crate::model::{MllmConfig, TrainConfig};

pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Dataset directory written by `gen-data`.
    pub dataset: PathBuf,
    /// Run directory for checkpoints, logs and reports.
    pub out_dir: PathBuf,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub cosine: bool,
    /// Global gradient-norm clip. Written as a number, 0 meaning none.
    #[serde(with = "clip_on_disk")]
    pub grad_clip: Option<f64>,
    /// Save an intermediate checkpoint every this many steps; 0 disables.
    pub diag_every: usize,
    pub model: MllmConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
            steps: 600,
            batch_size: 16,
            lr: 3e-4,
            weight_decay: 0.0,
            warmup_frac: 0.03,
            cosine: true,
            grad_clip: Some(1.0),
            diag_every: 0,
            model: MllmConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        self.model.validate()?;
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr = {} must be positive", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!(
                "weight_decay = {} must be non-negative",
                self.weight_decay
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return bad(format!("warmup_frac = {} outside [0, 1)", self.warmup_frac));
        }
        if let Some(c) = self.grad_clip.filter(|c| !(c.is_finite() && *c > 0.0)) {
            return bad(format!("grad_clip = {c} must be positive"));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            optim: AdamWConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                warmup_frac: self.warmup_frac,
                cosine: self.cosine,
                total_steps: self.steps,
                ..AdamWConfig::default()
            },
            grad_clip: self.grad_clip,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Parses and validates; unknown keys are rejected.
    pub fn from_toml(s: &str) -> Result<Self> {
        let c: Self =
            toml::from_str(s).map_err(|e| Error::Validation(format!("run config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the serialized config, lowercase hex.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }
}

mod clip_on_disk {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(v.unwrap_or(0.0))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        let v = f64::deserialize(d)?;
        Ok((v != 0.0).then_some(v))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
