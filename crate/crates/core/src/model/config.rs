// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{qa::PROMPT_LEN, vocab};

/// Where the predictive loss takes its detached target from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorSource {
    /// Projected visual tokens entering the decoder.
    #[default]
    PreLlm,
    /// Vision-encoder output before the projector.
    PreProj,
}

impl fmt::Display for AnchorSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnchorSource::PreLlm => "pre-llm",
            AnchorSource::PreProj => "pre-proj",
        })
    }
}

impl FromStr for AnchorSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre-llm" => Ok(AnchorSource::PreLlm),
            "pre-proj" => Ok(AnchorSource::PreProj),
            other => Err(Error::Validation(format!(
                "unknown anchor source {other:?} (expected pre-llm or pre-proj)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MllmConfig {
    /// Patches per image side.
    pub grid: usize,
    /// Pixels per patch side.
    pub patch: usize,
    pub d_v: usize,
    pub d_l: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub lambda: f64,
    /// Decoder layer whose visual states feed the prediction head; `None`
    /// means the middle layer.
    pub target_layer: Option<usize>,
    pub anchor: AnchorSource,
    /// Maximum answer length in tokens, including the terminator.
    pub max_answer_len: usize,
    /// Amplitude of the fixed 2-D sinusoidal code added to patch features.
    pub pos_scale: f64,
    pub seed: u64,
}

impl Default for MllmConfig {
    fn default() -> Self {
        Self {
            grid: 8,
            patch: 4,
            d_v: 32,
            d_l: 64,
            layers: 8,
            heads: 4,
            d_ff: 128,
            vocab: vocab::VOCAB_SIZE,
            lambda: 0.5,
            target_layer: None,
            anchor: AnchorSource::PreLlm,
            max_answer_len: 12,
            pos_scale: 0.1,
            seed: 0,
        }
    }
}

impl MllmConfig {
    pub fn num_patches(&self) -> usize {
        self.grid * self.grid
    }

    pub fn d_patch(&self) -> usize {
        self.patch * self.patch
    }

    pub fn head_dim(&self) -> usize {
        self.d_l / self.heads
    }

    pub fn target_layer(&self) -> usize {
        self.target_layer.unwrap_or((self.layers / 2).max(1))
    }

    /// Width of the prediction head's output, matching the anchor.
    pub fn d_target(&self) -> usize {
        match self.anchor {
            AnchorSource::PreLlm => self.d_l,
            AnchorSource::PreProj => self.d_v,
        }
    }

    pub fn prompt_len(&self) -> usize {
        PROMPT_LEN
    }

    /// Longest sequence the decoder accepts.
    pub fn max_seq_len(&self) -> usize {
        PROMPT_LEN + self.num_patches() + self.max_answer_len.saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.grid == 0 || self.patch == 0 {
            return bad("grid and patch must be positive".into());
        }
        if self.d_v == 0 || !self.d_v.is_multiple_of(4) {
            return bad(format!(
                "d_v = {} must be a positive multiple of 4",
                self.d_v
            ));
        }
        if self.d_l == 0 || self.heads == 0 || !self.d_l.is_multiple_of(self.heads) {
            return bad(format!(
                "d_l = {} must be divisible by heads = {}",
                self.d_l, self.heads
            ));
        }
        if self.layers == 0 || self.d_ff == 0 {
            return bad("layers and d_ff must be positive".into());
        }
        if self.vocab < vocab::VOCAB_SIZE {
            return bad(format!(
                "vocab = {} is smaller than the token set ({})",
                self.vocab,
                vocab::VOCAB_SIZE
            ));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!(
                "lambda = {} must be finite and non-negative",
                self.lambda
            ));
        }
        let t = self.target_layer();
        if t == 0 || t > self.layers {
            return bad(format!("target layer {t} outside 1..={}", self.layers));
        }
        if self.max_answer_len == 0 {
            return bad("max_answer_len must be at least 1".into());
        }
        if !(self.pos_scale.is_finite() && self.pos_scale >= 0.0) {
            return bad("pos_scale must be finite and non-negative".into());
        }
        Ok(())
    }
}
