// SPDX-License-Identifier: MIT OR Apache-2.0

//! Answer-token cross-entropy, the predictive cosine loss and their sum.

use super::config::AnchorSource;
use super::mllm::{ForwardTrace, Mllm, Sample, TapeForward};
use crate::autodiff::{finite_diff_check_on, FdOptions, FdReport, Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Tape handles of the loss terms of one example.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub lm: Var,
    /// Absent when the predictive weight is zero.
    pub pre: Option<Var>,
    pub total: Var,
}

/// Mean negative log-likelihood of the answer tokens.
pub fn lm_loss_on_tape(tape: &mut Tape, fwd: &TapeForward) -> Result<Var> {
    if fwd.targets.is_empty() {
        return Err(Error::InvalidArgument("empty answer".into()));
    }
    tape.cross_entropy(fwd.logits, &fwd.targets)
}

/// `−mean_i cos(pred_i, sg(anchor_i))`.
pub fn predictive_loss(tape: &mut Tape, pred: Var, anchor: Var) -> Result<Var> {
    let target = tape.stop_gradient(anchor);
    let cos = tape.cosine_rows(pred, target)?;
    let m = tape.mean(cos);
    Ok(tape.scale(m, -1.0))
}

/// Predictive loss from the target layer's visual states to the detached anchor.
pub fn pre_loss_on_tape(model: &Mllm, tape: &mut Tape, fwd: &TapeForward) -> Result<Var> {
    let anchor = match model.config.anchor {
        AnchorSource::PreLlm => fwd.hv0,
        AnchorSource::PreProj => fwd.z,
    };
    pre_loss_to_anchor(model, tape, fwd, anchor)
}

fn pre_loss_to_anchor(
    model: &Mllm,
    tape: &mut Tape,
    fwd: &TapeForward,
    anchor: Var,
) -> Result<Var> {
    let l = model.config.target_layer();
    if l == 0 || l >= fwd.hidden.len() {
        return Err(Error::Validation(format!(
            "target layer {l} outside 1..={}",
            fwd.hidden.len() - 1
        )));
    }
    let visual = tape.slice_rows(fwd.hidden[l], fwd.visual_start, fwd.n_visual)?;
    let pred = model.predict_on_tape(tape, visual)?;
    predictive_loss(tape, pred, anchor)
}

/// `L_LM + λ·L_PRe`. With `λ = 0` the total is the language-model node itself
/// and the prediction head is never evaluated.
pub fn total_loss_on_tape(model: &Mllm, tape: &mut Tape, fwd: &TapeForward) -> Result<LossVars> {
    total_loss_inner(model, tape, fwd, None)
}

fn total_loss_inner(
    model: &Mllm,
    tape: &mut Tape,
    fwd: &TapeForward,
    anchor: Option<&Tensor>,
) -> Result<LossVars> {
    let lm = lm_loss_on_tape(tape, fwd)?;
    let lambda = model.config.lambda;
    if lambda == 0.0 {
        return Ok(LossVars {
            lm,
            pre: None,
            total: lm,
        });
    }
    let pre = match anchor {
        Some(a) => {
            let a = tape.constant(a.clone());
            pre_loss_to_anchor(model, tape, fwd, a)?
        }
        None => pre_loss_on_tape(model, tape, fwd)?,
    };
    let weighted = tape.scale(pre, lambda);
    let total = tape.add(lm, weighted)?;
    Ok(LossVars {
        lm,
        pre: Some(pre),
        total,
    })
}

/// The training objective with the anchor held at `anchor` instead of being
/// recomputed. This is the function whose gradient backward produces: the
/// stop-gradient makes the anchor a constant at the evaluation point, so
/// finite differences must hold it fixed as well.
pub fn objective_with_fixed_anchor(
    model: &Mllm,
    sample: Sample<'_>,
    anchor: &Tensor,
) -> Result<f64> {
    let mut tape = Tape::new();
    let fwd = model.forward_on_tape(&mut tape, sample)?;
    let l = total_loss_inner(model, &mut tape, &fwd, Some(anchor))?;
    Ok(tape.value(l.total).item())
}

/// Finite-difference check of the training objective's gradient on one
/// example at the current weights. Perturbations of a block weight only
/// replay the forward pass from that block on.
pub fn check_objective_gradients(
    model: &Mllm,
    sample: Sample<'_>,
    opts: &FdOptions,
) -> Result<FdReport> {
    let mut m = model.clone();
    let g = m.example_gradients(sample)?;
    m.store.zero_grads();
    for (id, t) in &g.grads {
        m.store.accumulate_grad(*id, t)?;
    }
    let base = m.forward(sample)?;
    let anchor = anchor_of(&m, &base);
    finite_diff_check_on(
        &mut m,
        |m, id| {
            let mut tape = Tape::new();
            let fwd = match m.first_dependent_layer(id) {
                Some(start) => m.forward_from_layer(&mut tape, &base, start)?,
                None => m.forward_on_tape(&mut tape, sample)?,
            };
            let l = total_loss_inner(m, &mut tape, &fwd, Some(&anchor))?;
            Ok(tape.value(l.total).item())
        },
        opts,
    )
}

/// The anchor tensor a trace of `model` is scored against.
pub fn anchor_of(model: &Mllm, trace: &ForwardTrace) -> Tensor {
    match model.config.anchor {
        AnchorSource::PreLlm => trace.hv0.clone(),
        AnchorSource::PreProj => trace.z.clone(),
    }
}

/// Value-level counterpart of [`total_loss_on_tape`].
pub fn combine_losses(lm: f64, pre: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        lm
    } else {
        lm + lambda * pre
    }
}

/// Language-model loss of a recorded trace.
pub fn lm_loss(trace: &ForwardTrace) -> Result<f64> {
    if trace.targets.is_empty() {
        return Err(Error::InvalidArgument("empty answer".into()));
    }
    let mut tape = Tape::new();
    let logits = tape.constant(trace.logits.clone());
    let l = tape.cross_entropy(logits, &trace.targets)?;
    Ok(tape.value(l).item())
}

/// Predictive loss of a recorded trace under `model`'s head and anchor choice.
pub fn pre_loss(model: &Mllm, trace: &ForwardTrace) -> Result<f64> {
    let l = model.config.target_layer();
    if l == 0 || l >= trace.hidden.len() {
        return Err(Error::Validation(format!(
            "target layer {l} outside 1..={}",
            trace.hidden.len() - 1
        )));
    }
    let mut tape = Tape::new();
    let visual = tape.constant(trace.visual(l));
    let pred = model.predict_on_tape(&mut tape, visual)?;
    let anchor = tape.constant(anchor_of(model, trace));
    let loss = predictive_loss(&mut tape, pred, anchor)?;
    Ok(tape.value(loss).item())
}
