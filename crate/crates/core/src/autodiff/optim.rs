// SPDX-License-Identifier: MIT OR Apache-2.0

use std::f64::consts::PI;

use super::params::ParamStore;
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Fraction of `total_steps` spent in linear warmup.
    pub warmup_frac: f64,
    /// Cosine-decay to zero after warmup; constant otherwise.
    pub cosine: bool,
    pub total_steps: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_frac: 0.03,
            cosine: true,
            total_steps: 0,
        }
    }
}

impl AdamWConfig {
    pub fn warmup_steps(&self) -> usize {
        (self.warmup_frac * self.total_steps as f64).ceil() as usize
    }

    /// Learning rate for 1-based step `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        if self.total_steps == 0 {
            return self.lr;
        }
        let warm = self.warmup_steps();
        if t <= warm {
            return self.lr * t as f64 / warm as f64;
        }
        if !self.cosine {
            return self.lr;
        }
        let span = self.total_steps.saturating_sub(warm).max(1);
        let progress = ((t - warm) as f64 / span as f64).min(1.0);
        self.lr * 0.5 * (1.0 + (PI * progress).cos())
    }
}

/// Decoupled-weight-decay Adam with bias correction.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let m: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value().shape()))
            .collect();
        Self {
            config,
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update from the gradients held in `store`; returns the
    /// learning rate used.
    pub fn step(&mut self, store: &mut ParamStore) -> f64 {
        self.step += 1;
        let t = self.step;
        let c = &self.config;
        let lr = c.lr_at(t);
        let bc1 = 1.0 - c.beta1.powi(t as i32);
        let bc2 = 1.0 - c.beta2.powi(t as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let g = p.grad.data().to_vec();
            let (md, vd) = (m.data_mut(), v.data_mut());
            let w = p.value_mut().data_mut();
            for i in 0..w.len() {
                md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * g[i];
                vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                w[i] *= 1.0 - lr * c.weight_decay;
                w[i] -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        lr
    }
}
