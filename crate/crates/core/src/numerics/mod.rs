// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense tensors, linear algebra and deterministic random streams.

mod linalg;
mod rng;
mod tensor;

pub use linalg::{
    cosine, cosine_slices, covariance, dot, matmul, matmul_nt, matmul_tn, pearson_corr, solve_spd,
    sym_eig, SymEig, COSINE_NORM_FLOOR,
};
pub use rng::{stable_hash, RngStream};
pub use tensor::Tensor;
