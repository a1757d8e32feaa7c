// SPDX-License-Identifier: MIT OR Apache-2.0

//! Patch-level geometry of visual hidden states: pooling, object cohesion and
//! coupling, their contrast, and cosine similarity maps.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{dot, Tensor, COSINE_NORM_FLOOR};

/// Denominator floor of [`contrast`].
pub const CONTRAST_FLOOR: f64 = 1e-6;

/// Background class id, left out of cohesion and coupling.
pub const BACKGROUND: u16 = 0;

fn check_features(h: &Tensor, what: &str) -> Result<()> {
    if h.rank() != 2 {
        return Err(Error::InvalidShape {
            shape: h.shape().to_vec(),
            reason: format!("{what} expects an N_p × d matrix"),
        });
    }
    if h.rows() == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    Ok(())
}

fn check_labels(h: &Tensor, labels: &[u16]) -> Result<()> {
    check_features(h, "patch metrics")?;
    if labels.len() != h.rows() {
        return Err(Error::ShapeMismatch {
            op: "patch labels",
            lhs: h.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    Ok(())
}

/// Mean over patches.
pub fn pool_global(h: &Tensor) -> Result<Tensor> {
    check_features(h, "pool_global")?;
    Ok(h.mean_rows())
}

/// Rows scaled to unit length; rows below the cosine norm floor become zero,
/// so their cosine with anything is 0.
fn unit_rows(h: &Tensor) -> Tensor {
    let mut out = h.clone();
    for i in 0..out.rows() {
        let r = out.row_mut(i);
        let n = dot(r, r).sqrt();
        if n < COSINE_NORM_FLOOR {
            r.fill(0.0);
        } else {
            r.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

fn cos_unit(u: &Tensor, i: usize, j: usize) -> f64 {
    dot(u.row(i), u.row(j)).clamp(-1.0, 1.0)
}

/// Patch indices per non-background class, classes ascending.
fn class_members(labels: &[u16]) -> BTreeMap<u16, Vec<usize>> {
    let mut m: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        if c != BACKGROUND {
            m.entry(c).or_default().push(i);
        }
    }
    m
}

/// A mean of pairwise cosines and how many pairs went into it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairMean {
    pub value: f64,
    pub pairs: usize,
}

/// Mean over object classes with at least two patches of the mean cosine
/// over unordered same-class patch pairs.
pub fn cohesion(h: &Tensor, labels: &[u16]) -> Result<PairMean> {
    check_labels(h, labels)?;
    cohesion_unit(&unit_rows(h), labels)
}

fn cohesion_unit(u: &Tensor, labels: &[u16]) -> Result<PairMean> {
    let (mut total, mut classes, mut pairs) = (0.0, 0usize, 0usize);
    for members in class_members(labels).values() {
        if members.len() < 2 {
            continue;
        }
        let mut s = 0.0;
        let mut n = 0usize;
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                s += cos_unit(u, i, j);
                n += 1;
            }
        }
        total += s / n as f64;
        classes += 1;
        pairs += n;
    }
    if classes == 0 {
        return Err(Error::InvalidArgument(
            "no object class covers two or more patches".into(),
        ));
    }
    Ok(PairMean {
        value: total / classes as f64,
        pairs,
    })
}

/// Mean over unordered pairs of distinct object classes of the mean cosine
/// across their patches.
pub fn coupling(h: &Tensor, labels: &[u16]) -> Result<PairMean> {
    check_labels(h, labels)?;
    coupling_unit(&unit_rows(h), labels)
}

fn coupling_unit(u: &Tensor, labels: &[u16]) -> Result<PairMean> {
    let groups: Vec<Vec<usize>> = class_members(labels).into_values().collect();
    if groups.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "coupling needs two object classes, found {}",
            groups.len()
        )));
    }
    let (mut total, mut class_pairs, mut pairs) = (0.0, 0usize, 0usize);
    for a in 0..groups.len() {
        for b in a + 1..groups.len() {
            let mut s = 0.0;
            for &i in &groups[a] {
                for &j in &groups[b] {
                    s += cos_unit(u, i, j);
                }
            }
            let n = groups[a].len() * groups[b].len();
            total += s / n as f64;
            class_pairs += 1;
            pairs += n;
        }
    }
    Ok(PairMean {
        value: total / class_pairs as f64,
        pairs,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contrast {
    pub value: f64,
    /// The coupling was below [`CONTRAST_FLOOR`] and got replaced by it.
    pub floored: bool,
}

/// `cohesion / max(coupling, 1e-6)`.
pub fn contrast(cohesion: f64, coupling: f64) -> Contrast {
    let floored = coupling < CONTRAST_FLOOR;
    Contrast {
        value: cohesion / coupling.max(CONTRAST_FLOOR),
        floored,
    }
}

/// Cohesion, coupling and contrast of one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchMetrics {
    pub cohesion: PairMean,
    pub coupling: PairMean,
    pub contrast: Contrast,
}

/// All three patch metrics of one image, or `None` when the labels do not
/// support both cohesion and coupling.
pub fn patch_metrics(h: &Tensor, labels: &[u16]) -> Result<Option<PatchMetrics>> {
    check_labels(h, labels)?;
    let u = unit_rows(h);
    let (Ok(coh), Ok(coup)) = (cohesion_unit(&u, labels), coupling_unit(&u, labels)) else {
        return Ok(None);
    };
    Ok(Some(PatchMetrics {
        cohesion: coh,
        coupling: coup,
        contrast: contrast(coh.value, coup.value),
    }))
}

/// Per-image metrics averaged with equal image weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchSummary {
    pub cohesion: f64,
    pub coupling: f64,
    /// Mean of the per-image contrasts.
    pub contrast: f64,
    pub images: usize,
    pub floored: usize,
}

/// Averages per-image metrics; images the labels cannot score are skipped.
pub fn summarize_patch_metrics(per_image: &[Option<PatchMetrics>]) -> Result<PatchSummary> {
    let scored: Vec<&PatchMetrics> = per_image.iter().flatten().collect();
    if scored.is_empty() {
        return Err(Error::InvalidArgument(
            "no image has two scorable object classes".into(),
        ));
    }
    let n = scored.len() as f64;
    Ok(PatchSummary {
        cohesion: scored.iter().map(|m| m.cohesion.value).sum::<f64>() / n,
        coupling: scored.iter().map(|m| m.coupling.value).sum::<f64>() / n,
        contrast: scored.iter().map(|m| m.contrast.value).sum::<f64>() / n,
        images: scored.len(),
        floored: scored.iter().filter(|m| m.contrast.floored).count(),
    })
}

/// Cosine from patch `probe` to every patch. The probe's own entry is 1.
pub fn similarity_map(h: &Tensor, probe: usize) -> Result<Vec<f64>> {
    check_features(h, "similarity_map")?;
    if probe >= h.rows() {
        return Err(Error::InvalidArgument(format!(
            "probe patch {probe} outside 0..{}",
            h.rows()
        )));
    }
    let u = unit_rows(h);
    let mut out: Vec<f64> = (0..u.rows()).map(|j| cos_unit(&u, probe, j)).collect();
    out[probe] = 1.0;
    Ok(out)
}

/// Lays a per-patch vector out as a `grid × grid` matrix in row-major patch order.
pub fn to_grid(values: &[f64], grid: usize) -> Result<Tensor> {
    if values.len() != grid * grid {
        return Err(Error::InvalidArgument(format!(
            "{} values do not fill a {grid}×{grid} grid",
            values.len()
        )));
    }
    Tensor::new(vec![grid, grid], values.to_vec())
}
