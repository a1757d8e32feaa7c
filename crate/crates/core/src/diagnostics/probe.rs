// SPDX-License-Identifier: MIT OR Apache-2.0

//! Closed-form one-vs-rest ridge probe on frozen features.

use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_tn, solve_spd, Tensor};

/// Ridge strength relative to the mean diagonal of `XᵀX`.
pub const RIDGE_SCALE: f64 = 1e-3;

/// A fitted probe: per-dimension standardization, ridge weights and the
/// class-frequency intercept.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    /// Distinct training labels, ascending; column `k` of `weights` scores `classes[k]`.
    pub classes: Vec<usize>,
    pub mean: Vec<f64>,
    /// Infinite for dimensions that were constant in training.
    pub scale: Vec<f64>,
    /// `d × classes` weights on standardized features.
    pub weights: Tensor,
    pub intercept: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub probe: LinearProbe,
}

fn standardize(x: &Tensor, mean: &[f64], scale: &[f64]) -> Tensor {
    let mut out = x.clone();
    for i in 0..out.rows() {
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            *v = (*v - mean[j]) / scale[j];
        }
    }
    out
}

impl LinearProbe {
    /// Fits on `x` (N × d) with integer labels. Features are standardized with
    /// the training mean and standard deviation; dimensions that are constant
    /// up to roundoff get an infinite scale and so contribute nothing. Targets
    /// are centered one-hot codes, so the intercept is the class frequency
    /// vector.
    pub fn fit(x: &Tensor, labels: &[usize]) -> Result<Self> {
        if x.rank() != 2 || x.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "linear_probe",
                lhs: x.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let mut classes = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "probe training set has {} class(es), need at least two",
                classes.len()
            )));
        }
        let (n, d, k) = (x.rows(), x.cols(), classes.len());
        let mean = x.mean_rows().into_data();
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let sd = ((0..n).map(|i| (x.get(i, j) - mean[j]).powi(2)).sum::<f64>() / n as f64)
                    .sqrt();
                if sd > 1e-12 * mean[j].abs().max(1.0) {
                    sd
                } else {
                    f64::INFINITY
                }
            })
            .collect();
        let xs = standardize(x, &mean, &scale);

        let mut y = Tensor::zeros(&[n, k]);
        for (i, l) in labels.iter().enumerate() {
            let c = classes.binary_search(l).expect("label from the class list");
            y.set(i, c, 1.0);
        }
        let intercept = y.mean_rows().into_data();
        for i in 0..n {
            for (c, v) in y.row_mut(i).iter_mut().enumerate() {
                *v -= intercept[c];
            }
        }

        let mut gram = matmul_tn(&xs, &xs)?;
        let trace: f64 = (0..d).map(|j| gram.get(j, j)).sum();
        // constant features give XᵀY = 0, so any positive ridge yields W = 0
        let alpha = if trace > 0.0 {
            RIDGE_SCALE * trace / d as f64
        } else {
            1.0
        };
        for j in 0..d {
            gram.set(j, j, gram.get(j, j) + alpha);
        }
        let weights = solve_spd(&gram, &matmul_tn(&xs, &y)?)?;
        Ok(Self {
            classes,
            mean,
            scale,
            weights,
            intercept,
        })
    }

    /// Class scores, one row per example.
    pub fn scores(&self, x: &Tensor) -> Result<Tensor> {
        let mut s = matmul(&standardize(x, &self.mean, &self.scale), &self.weights)?;
        for i in 0..s.rows() {
            for (c, v) in s.row_mut(i).iter_mut().enumerate() {
                *v += self.intercept[c];
            }
        }
        Ok(s)
    }

    /// Argmax labels; ties go to the smaller class.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let s = self.scores(x)?;
        Ok((0..s.rows())
            .map(|i| {
                let row = s.row(i);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                self.classes[best]
            })
            .collect())
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() || x.rows() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} test rows for {} labels",
                x.rows(),
                labels.len()
            )));
        }
        let pred = self.predict(x)?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

/// Fits on the probe-train features and scores the probe-test features.
pub fn linear_probe(
    train_x: &Tensor,
    train_labels: &[usize],
    test_x: &Tensor,
    test_labels: &[usize],
) -> Result<ProbeResult> {
    let probe = LinearProbe::fit(train_x, train_labels)?;
    let accuracy = probe.accuracy(test_x, test_labels)?;
    Ok(ProbeResult { accuracy, probe })
}
