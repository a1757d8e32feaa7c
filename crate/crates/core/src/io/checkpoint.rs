// SPDX-License-Identifier: MIT OR Apache-2.0

//! Model weights as a tensor archive keyed by parameter name.

use std::collections::HashSet;
use std::path::Path;

use super::archive::TensorArchive;
use crate::error::{Error, Result};
use crate::model::{Mllm, MllmConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.prea";

/// Every parameter, frozen ones included, in store order.
pub fn checkpoint_archive(model: &Mllm) -> Result<TensorArchive> {
    let mut a = TensorArchive::new();
    for (_, p) in model.store.iter() {
        a.push(p.name.clone(), p.value().clone())?;
    }
    Ok(a)
}

pub fn save_checkpoint(model: &Mllm, path: &Path) -> Result<()> {
    checkpoint_archive(model)?.write(path)
}

/// Builds a model for `config` and overwrites every parameter from `archive`.
/// Missing, surplus or misshapen entries are errors.
pub fn model_from_archive(config: MllmConfig, archive: &TensorArchive) -> Result<Mllm> {
    let mut model = Mllm::new(config)?;
    let mut used = HashSet::new();
    for p in model.store.iter_mut() {
        let t = archive.require(&p.name)?;
        if t.shape() != p.value().shape() {
            return Err(Error::Format(format!(
                "checkpoint entry {:?} has shape {:?}, the model expects {:?}",
                p.name,
                t.shape(),
                p.value().shape()
            )));
        }
        *p.value_mut() = t.clone();
        used.insert(p.name.clone());
    }
    if let Some((name, _)) = archive.entries().iter().find(|(n, _)| !used.contains(n)) {
        return Err(Error::Format(format!(
            "checkpoint entry {name:?} matches no parameter"
        )));
    }
    Ok(model)
}

pub fn load_checkpoint(config: MllmConfig, path: &Path) -> Result<Mllm> {
    model_from_archive(config, &TensorArchive::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn tiny() -> MllmConfig {
        MllmConfig {
            grid: 2,
            patch: 2,
            d_v: 4,
            d_l: 8,
            layers: 2,
            heads: 2,
            d_ff: 8,
            seed: 3,
            ..MllmConfig::default()
        }
    }

    #[test]
    fn round_trip_restores_f32_rounded_weights() {
        let m = Mllm::new(tiny()).unwrap();
        let a = checkpoint_archive(&m).unwrap();
        let back =
            model_from_archive(tiny(), &TensorArchive::from_bytes(&a.to_bytes()).unwrap()).unwrap();
        for ((_, p), (_, q)) in m.store.iter().zip(back.store.iter()) {
            assert_eq!(p.name, q.name);
            let rounded = p.value().map(|v| v as f32 as f64);
            assert_eq!(&rounded, q.value());
        }
        // an already-rounded model serializes to the same bytes
        assert_eq!(checkpoint_archive(&back).unwrap().to_bytes(), a.to_bytes());
    }

    #[test]
    fn mismatches_are_errors() {
        let m = Mllm::new(tiny()).unwrap();
        let a = checkpoint_archive(&m).unwrap();
        let other = MllmConfig { d_ff: 12, ..tiny() };
        assert!(model_from_archive(other, &a).is_err());
        let mut extra = a.clone();
        extra.push("stray", Tensor::scalar(1.0)).unwrap();
        assert!(model_from_archive(tiny(), &extra).is_err());
        let fewer = MllmConfig {
            layers: 3,
            ..tiny()
        };
        assert!(model_from_archive(fewer, &a).is_err());
    }
}
