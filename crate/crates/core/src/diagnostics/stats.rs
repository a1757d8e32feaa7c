// SPDX-License-Identifier: MIT OR Apache-2.0

//! Spectral and correlation statistics of a feature matrix.

use crate::error::{Error, Result};
use crate::numerics::{covariance, pearson_corr, sym_eig, Tensor};

/// Default explained-variance threshold.
pub const PCA_THRESHOLD: f64 = 0.95;

/// Slack on the cumulative ratio so exactly-attained thresholds are not missed
/// by summation roundoff.
const RATIO_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EffectiveDim {
    pub dim: usize,
    /// Every column has zero variance; `dim` is then 1.
    pub degenerate: bool,
}

fn check_matrix(x: &Tensor, what: &str) -> Result<()> {
    if x.rank() != 2 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: format!("{what} expects an N × d matrix"),
        });
    }
    if x.rows() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: x.rows(),
        });
    }
    Ok(())
}

/// Smallest number of principal components whose eigenvalues (clamped at 0)
/// reach `threshold` of the total variance.
pub fn pca_effective_dim(x: &Tensor, threshold: f64) -> Result<EffectiveDim> {
    check_matrix(x, "pca_effective_dim")?;
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold {threshold} outside (0, 1]"
        )));
    }
    let eig = sym_eig(&covariance(x)?)?;
    let values: Vec<f64> = eig.values.iter().map(|v| v.max(0.0)).collect();
    Ok(dim_from_spectrum(&values, threshold))
}

/// Cumulative-ratio rule on a descending, non-negative spectrum.
pub fn dim_from_spectrum(values: &[f64], threshold: f64) -> EffectiveDim {
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return EffectiveDim {
            dim: 1,
            degenerate: true,
        };
    }
    let mut acc = 0.0;
    for (k, v) in values.iter().enumerate() {
        acc += v;
        if acc / total >= threshold - RATIO_SLACK {
            return EffectiveDim {
                dim: k + 1,
                degenerate: false,
            };
        }
    }
    EffectiveDim {
        dim: values.len(),
        degenerate: false,
    }
}

/// Mean absolute off-diagonal Pearson correlation between feature columns.
pub fn redundancy(x: &Tensor) -> Result<f64> {
    check_matrix(x, "redundancy")?;
    let d = x.cols();
    if d < 2 {
        return Err(Error::InvalidArgument(
            "redundancy needs at least two feature columns".into(),
        ));
    }
    let c = pearson_corr(x)?;
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i != j {
                s += c.get(i, j).abs();
            }
        }
    }
    Ok(s / (d * (d - 1)) as f64)
}
