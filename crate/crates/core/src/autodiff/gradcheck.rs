// SPDX-License-Identifier: MIT OR Apache-2.0

use super::params::{ParamId, ParamStore};
use crate::error::Result;
use crate::numerics::RngStream;

/// `|a − b| / max(|a|, |b|, 1e-10)`, and 0 when both magnitudes are below 1e-10.
pub fn relative_error(a: f64, b: f64) -> f64 {
    if a.abs() < 1e-10 && b.abs() < 1e-10 {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs()).max(1e-10)
}

#[derive(Clone, Debug)]
pub struct FdOptions {
    pub h: f64,
    /// Coordinates checked per tensor; smaller tensors are checked in full.
    pub coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            coords_per_tensor: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FdWorst {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// One checked coordinate.
#[derive(Clone, Copy, Debug)]
pub struct FdSample {
    pub param: ParamId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl FdSample {
    pub fn rel_error(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub tensors_checked: usize,
    pub worst: Option<FdWorst>,
    pub samples: Vec<FdSample>,
}

/// Compares the gradients currently held in `store` against central
/// differences of `f`. The caller is responsible for having run backward on
/// the same objective at the current parameter values.
pub fn finite_diff_check<F>(store: &mut ParamStore, mut f: F, opts: &FdOptions) -> Result<FdReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    finite_diff_check_on(store, |s, _| f(s), opts)
}

/// Like [`finite_diff_check`] for any owner of a parameter store. `f` also
/// receives the parameter being perturbed so it can reuse work that does not
/// depend on it.
pub fn finite_diff_check_on<T, F>(target: &mut T, mut f: F, opts: &FdOptions) -> Result<FdReport>
where
    T: AsMut<ParamStore> + AsRef<ParamStore>,
    F: FnMut(&T, ParamId) -> Result<f64>,
{
    let rng = RngStream::new(opts.seed);
    let mut report = FdReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        tensors_checked: 0,
        worst: None,
        samples: Vec::new(),
    };
    let ids: Vec<_> = target
        .as_ref()
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let (name, n) = {
            let p = target.as_ref().get(id);
            (p.name.clone(), p.value().len())
        };
        let mut coords: Vec<usize> = (0..n).collect();
        if n > opts.coords_per_tensor {
            rng.substream(&name).shuffle(&mut coords);
            coords.truncate(opts.coords_per_tensor);
            coords.sort_unstable();
        }
        report.tensors_checked += 1;
        for &i in &coords {
            let orig = target.as_ref().get(id).value().data()[i];
            set_coord(target.as_mut(), id, i, orig + opts.h);
            let fp = f(target, id)?;
            set_coord(target.as_mut(), id, i, orig - opts.h);
            let fm = f(target, id)?;
            set_coord(target.as_mut(), id, i, orig);
            let numeric = (fp - fm) / (2.0 * opts.h);
            let analytic = target.as_ref().get(id).grad.data()[i];
            let err = relative_error(analytic, numeric);
            report.coords_checked += 1;
            report.samples.push(FdSample {
                param: id,
                index: i,
                analytic,
                numeric,
            });
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some(FdWorst {
                    param: name.clone(),
                    index: i,
                    analytic,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

fn set_coord(store: &mut ParamStore, id: ParamId, i: usize, v: f64) {
    store.get_mut(id).value_mut().data_mut()[i] = v;
}
