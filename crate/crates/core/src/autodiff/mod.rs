//! Reverse-mode differentiation over dense `f64` matrices, plus the small
//! network and optimizer pieces the critics and the actor need.

mod adam;
mod graph;
pub mod math;
mod mlp;
mod tensor;

use alloc::string::String;

pub use adam::{adam_step, OptimizerState};
pub use graph::{argmax, gaussian_log_density, half_cv_squared, normal_cdf, softmax_into, Graph, Var};
pub use mlp::{Activation, BoundMlp, MlpParams};
pub use tensor::{forward_affine, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },
    #[error("invalid usage: {detail}")]
    Usage { detail: &'static str },
}
