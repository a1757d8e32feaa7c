// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layer-wise measurements of visual hidden states.

mod lens;
mod patch;
mod probe;
mod report;
mod stats;

pub use lens::{logit_lens, top_k, LensLayer};
pub use patch::{
    cohesion, contrast, coupling, patch_metrics, pool_global, similarity_map,
    summarize_patch_metrics, to_grid, Contrast, PairMean, PatchMetrics, PatchSummary, BACKGROUND,
    CONTRAST_FLOOR,
};
pub use probe::{linear_probe, LinearProbe, ProbeResult, RIDGE_SCALE};
pub use report::{layer_report, layer_row, LayerRow, SplitFeatures};
pub use stats::{dim_from_spectrum, pca_effective_dim, redundancy, EffectiveDim, PCA_THRESHOLD};
