// SPDX-License-Identifier: MIT OR Apache-2.0

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named weight tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    value: Arc<Tensor>,
    pub grad: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub(crate) fn shared_value(&self) -> Arc<Tensor> {
        Arc::clone(&self.value)
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.value)
    }
}

/// Standard deviation of the truncated-normal weight initialization.
pub const INIT_STD: f64 = 0.02;

/// Ordered collection of parameters. Ids are positions in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name,
            value: Arc::new(value),
            grad,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    /// Weight matrix drawn from `N(0, 0.02²)` truncated at 2σ. Each parameter
    /// draws from its own name-keyed substream.
    pub fn add_normal(
        &mut self,
        rng: &RngStream,
        name: &str,
        shape: &[usize],
        trainable: bool,
    ) -> ParamId {
        let mut r = rng.substream(name);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.truncated_normal(INIT_STD, 2.0)).collect();
        let t = Tensor::from_vec(shape.to_vec(), data).expect("valid init shape");
        self.add(name, t, trainable)
    }

    /// Untruncated `N(0, std²)` draw, otherwise like [`ParamStore::add_normal`].
    pub fn add_scaled_normal(
        &mut self,
        rng: &RngStream,
        name: &str,
        shape: &[usize],
        std: f64,
        trainable: bool,
    ) -> ParamId {
        let mut r = rng.substream(name);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| std * r.normal()).collect();
        let t = Tensor::from_vec(shape.to_vec(), data).expect("valid init shape");
        self.add(name, t, trainable)
    }

    pub fn add_const(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.add(name, Tensor::full(shape, value), true)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        self.params[id.0].value()
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) -> Result<()> {
        self.params[id.0].grad.add_assign(g)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn scale_grads(&mut self, s: f64) {
        for p in &mut self.params {
            for v in p.grad.data_mut() {
                *v *= s;
            }
        }
    }

    /// L2 norm over all trainable gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.grad.norm_sq())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`. Returns
    /// the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm {
            self.scale_grads(max_norm / norm);
        }
        norm
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replaces values by name, e.g. when loading a checkpoint.
    pub fn load_values<'a>(
        &mut self,
        entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    ) -> Result<usize> {
        let mut loaded = 0;
        for (name, t) in entries {
            let Some(id) = self.find(name) else { continue };
            let p = &mut self.params[id.0];
            if p.value.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_values",
                    lhs: p.value.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            p.value = Arc::new(t.clone());
            loaded += 1;
        }
        Ok(loaded)
    }
}

impl AsRef<ParamStore> for ParamStore {
    fn as_ref(&self) -> &ParamStore {
        self
    }
}

impl AsMut<ParamStore> for ParamStore {
    fn as_mut(&mut self) -> &mut ParamStore {
        self
    }
}
