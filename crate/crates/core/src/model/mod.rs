// SPDX-License-Identifier: MIT OR Apache-2.0

//! The toy multimodal decoder, its losses and the training step.

mod config;
mod loss;
mod mllm;
mod train;

pub use config::{AnchorSource, MllmConfig};
pub use loss::{
    anchor_of, check_objective_gradients, combine_losses, lm_loss, lm_loss_on_tape,
    objective_with_fixed_anchor, pre_loss, pre_loss_on_tape, predictive_loss, total_loss_on_tape,
    LossVars,
};
pub use mllm::{
    patchify, position_code, ForwardTrace, LayerIds, Mllm, ParamIds, Sample, TapeForward,
};
pub use train::{EpochSampler, ExampleGrads, StepReport, TrainConfig, Trainer};

#[cfg(test)]
mod tests;
