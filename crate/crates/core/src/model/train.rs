// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mini-batch training: per-example gradients, ordered reduction, AdamW.

use std::time::Instant;

use super::loss::total_loss_on_tape;
use super::mllm::{Mllm, Sample};
use crate::autodiff::{AdamW, AdamWConfig, ParamId, Tape};
use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};
use crate::par::Exec;

/// Loss values and parameter gradients of one example.
#[derive(Clone, Debug)]
pub struct ExampleGrads {
    pub lm: f64,
    pub pre: Option<f64>,
    pub total: f64,
    pub grads: Vec<(ParamId, Tensor)>,
}

impl Mllm {
    /// Forward and backward for one example on a private tape.
    pub fn example_gradients(&self, sample: Sample<'_>) -> Result<ExampleGrads> {
        let mut tape = Tape::new();
        let fwd = self.forward_on_tape(&mut tape, sample)?;
        let loss = total_loss_on_tape(self, &mut tape, &fwd)?;
        let lm = tape.value(loss.lm).item();
        if !lm.is_finite() {
            return Err(Error::NonFinite(format!("language-model loss ({lm})")));
        }
        let pre = loss.pre.map(|p| tape.value(p).item());
        if let Some(p) = pre.filter(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("predictive loss ({p})")));
        }
        let total = tape.value(loss.total).item();
        let grads = tape.backward(loss.total)?;
        Ok(ExampleGrads {
            lm,
            pre,
            total,
            grads: tape.param_grads(&grads),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optim: AdamWConfig,
    /// Global gradient-norm clip applied after batch averaging.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optim: AdamWConfig::default(),
            grad_clip: Some(1.0),
        }
    }
}

/// Batch-mean losses and optimizer facts of one update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// 1-based step number.
    pub step: usize,
    pub lm: f64,
    pub pre: Option<f64>,
    pub total: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
    pub seconds: f64,
}

pub struct Trainer {
    pub model: Mllm,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    pub exec: Exec,
}

impl Trainer {
    pub fn new(model: Mllm, config: TrainConfig, exec: Exec) -> Self {
        let optimizer = AdamW::new(config.optim.clone(), &model.store);
        Self {
            model,
            optimizer,
            config,
            exec,
        }
    }

    /// Computes per-example gradients (possibly in parallel), sums them in
    /// batch order, averages, clips and applies one AdamW update.
    pub fn step(&mut self, batch: &[Sample<'_>]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let start = Instant::now();
        let model = &self.model;
        let results = self.exec.map(batch, |s| model.example_gradients(*s));
        let store = &mut self.model.store;
        store.zero_grads();
        let (mut lm, mut pre, mut total) = (0.0, 0.0, 0.0);
        let mut has_pre = false;
        for r in results {
            let r = r?;
            lm += r.lm;
            total += r.total;
            if let Some(p) = r.pre {
                pre += p;
                has_pre = true;
            }
            for (id, g) in &r.grads {
                store.accumulate_grad(*id, g)?;
            }
        }
        let n = batch.len() as f64;
        store.scale_grads(1.0 / n);
        let grad_norm = match self.config.grad_clip {
            Some(c) => store.clip_grad_norm(c),
            None => store.grad_norm(),
        };
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm ({grad_norm})")));
        }
        let lr = self.optimizer.step(store);
        Ok(StepReport {
            step: self.optimizer.steps_taken(),
            lm: lm / n,
            pre: has_pre.then_some(pre / n),
            total: total / n,
            grad_norm,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

/// Shuffled passes over `0..n`, reshuffled at every epoch boundary.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    rng: RngStream,
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    pub fn new(n: usize, rng: RngStream) -> Self {
        assert!(n > 0, "cannot sample from an empty set");
        Self {
            rng,
            order: (0..n).collect(),
            pos: n,
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}
