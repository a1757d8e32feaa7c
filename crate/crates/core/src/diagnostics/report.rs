// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-layer diagnostic table over a probe-train / probe-test split pair.

use super::patch::{patch_metrics, pool_global, summarize_patch_metrics, PatchSummary};
use super::probe::linear_probe;
use super::stats::{pca_effective_dim, redundancy, EffectiveDim, PCA_THRESHOLD};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::par::Exec;

/// Visual states of one split, `states[e][l]` being example `e` after layer `l`.
#[derive(Clone, Debug, Default)]
pub struct SplitFeatures {
    pub states: Vec<Vec<Tensor>>,
    /// Per-patch class ids of each example.
    pub patch_labels: Vec<Vec<u16>>,
    /// Image-level label of each example.
    pub probe_labels: Vec<usize>,
}

impl SplitFeatures {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn layers(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    fn validate(&self, what: &str) -> Result<()> {
        let n = self.states.len();
        if n == 0 {
            return Err(Error::InvalidArgument(format!("{what} split is empty")));
        }
        if self.patch_labels.len() != n || self.probe_labels.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{what} split has {n} examples but {} label maps and {} probe labels",
                self.patch_labels.len(),
                self.probe_labels.len()
            )));
        }
        let layers = self.layers();
        if layers == 0 || self.states.iter().any(|s| s.len() != layers) {
            return Err(Error::InvalidArgument(format!(
                "{what} split has ragged layer lists"
            )));
        }
        Ok(())
    }

    /// Pooled features of layer `l`, one row per example.
    pub fn pooled(&self, l: usize) -> Result<Tensor> {
        let rows = self
            .states
            .iter()
            .map(|s| pool_global(&s[l]).map(Tensor::into_data))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::from_rows(&rows))
    }

    /// Every patch of every example at layer `l`, stacked.
    pub fn stacked(&self, l: usize) -> Tensor {
        let d = self.states[0][l].cols();
        let mut data = Vec::new();
        for s in &self.states {
            data.extend_from_slice(s[l].data());
        }
        let n = data.len() / d;
        Tensor::from_vec(vec![n, d], data).expect("rows of equal width")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRow {
    pub layer: usize,
    pub probe_acc: f64,
    pub patch: PatchSummary,
    pub eff_dim: EffectiveDim,
    pub redundancy: f64,
}

/// One row per recorded layer. The probe fits on pooled probe-train features
/// and scores probe-test; the patch and spectral statistics use probe-test.
pub fn layer_report(
    train: &SplitFeatures,
    test: &SplitFeatures,
    exec: Exec,
) -> Result<Vec<LayerRow>> {
    train.validate("probe-train")?;
    test.validate("probe-test")?;
    if train.layers() != test.layers() {
        return Err(Error::InvalidArgument(format!(
            "probe-train has {} layers, probe-test {}",
            train.layers(),
            test.layers()
        )));
    }
    exec.map_range(test.layers(), |l| layer_row(train, test, l))
        .into_iter()
        .collect()
}

pub fn layer_row(train: &SplitFeatures, test: &SplitFeatures, l: usize) -> Result<LayerRow> {
    let probe = linear_probe(
        &train.pooled(l)?,
        &train.probe_labels,
        &test.pooled(l)?,
        &test.probe_labels,
    )?;
    let per_image = test
        .states
        .iter()
        .zip(&test.patch_labels)
        .map(|(s, labels)| patch_metrics(&s[l], labels))
        .collect::<Result<Vec<_>>>()?;
    let stacked = test.stacked(l);
    Ok(LayerRow {
        layer: l,
        probe_acc: probe.accuracy,
        patch: summarize_patch_metrics(&per_image)?,
        eff_dim: pca_effective_dim(&stacked, PCA_THRESHOLD)?,
        redundancy: redundancy(&stacked)?,
    })
}
