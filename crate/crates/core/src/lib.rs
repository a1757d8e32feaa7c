// SPDX-License-Identifier: MIT OR Apache-2.0

//! A desk-scale laboratory for visual-representation degradation in a toy
//! multimodal decoder, with a predictive self-regularization objective and
//! layer-wise diagnostics.

pub mod autodiff;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod model;
pub mod numerics;
pub mod par;
pub mod synth;

pub use error::{Error, Result};
