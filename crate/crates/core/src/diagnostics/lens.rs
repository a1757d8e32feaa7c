// SPDX-License-Identifier: MIT OR Apache-2.0

//! Logit lens: intermediate visual states read out through the final norm and
//! the output head.

use crate::error::{Error, Result};
use crate::model::Mllm;
use crate::numerics::Tensor;

/// Averaged next-token distribution of one layer's visual states.
#[derive(Clone, Debug, PartialEq)]
pub struct LensLayer {
    pub layer: usize,
    /// Over the vocabulary; sums to 1.
    pub dist: Vec<f64>,
    /// Most probable tokens with their mass, by descending mass then token id.
    pub top: Vec<(usize, f64)>,
}

/// Softmax of each row, accumulated into `acc`.
fn add_softmax_rows(logits: &Tensor, acc: &mut [f64]) {
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for (a, v) in acc.iter_mut().zip(e) {
            *a += v / z;
        }
    }
}

pub fn top_k(dist: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<(usize, f64)> = dist.iter().copied().enumerate().collect();
    idx.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    idx.truncate(k);
    idx
}

/// `visual[e][l]` holds example `e`'s visual states after layer `l`
/// (`l = 0` is the decoder input). Every layer's distribution is the mean of
/// the per-patch softmax over all patches of all examples.
pub fn logit_lens(model: &Mllm, visual: &[Vec<Tensor>], k: usize) -> Result<Vec<LensLayer>> {
    let layers = model.config.layers + 1;
    if visual.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    if let Some(bad) = visual.iter().find(|v| v.len() != layers) {
        return Err(Error::InvalidArgument(format!(
            "expected {layers} layers per example, got {}",
            bad.len()
        )));
    }
    let vocab = model.config.vocab;
    let mut out = Vec::with_capacity(layers);
    for l in 0..layers {
        let mut acc = vec![0.0; vocab];
        let mut rows = 0usize;
        for ex in visual {
            let logits = model.decode(&ex[l])?;
            add_softmax_rows(&logits, &mut acc);
            rows += logits.rows();
        }
        let dist: Vec<f64> = acc.iter().map(|a| a / rows as f64).collect();
        let top = top_k(&dist, k);
        out.push(LensLayer {
            layer: l,
            dist,
            top,
        });
    }
    Ok(out)
}
