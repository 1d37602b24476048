//! Tensor arithmetic with reverse-mode differentiation.

mod gemm;
mod gradcheck;
mod params;
mod rng;
mod tape;
mod tensor;

pub use gemm::gemm;
pub use gradcheck::{grad_check, GradCheck};
pub use params::{fan_in_uniform, kaiming_uniform, Bound, ParamId, ParamSet};
pub use rng::Rng;
pub use tape::{concat_cols, concat_rows, sigmoid, softplus, Activation, Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
