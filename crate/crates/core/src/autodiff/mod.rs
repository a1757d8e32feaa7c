// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode differentiation, parameters, gradient checking and AdamW.

mod gradcheck;
mod optim;
mod params;
mod tape;

pub use gradcheck::{
    finite_diff_check, finite_diff_check_on, relative_error, FdOptions, FdReport, FdSample, FdWorst,
};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore, Parameter, INIT_STD};
pub use tape::{Grads, Reach, Tape, Var};

#[cfg(test)]
mod tests;
