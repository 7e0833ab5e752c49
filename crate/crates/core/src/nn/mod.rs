//! Minimal dense-tensor math with reverse-mode differentiation.

mod gradcheck;
mod init;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{gradient_check, GradCheckConfig, GradCheckReport, TensorCheck};
pub use init::{glorot_uniform, init_params, orthogonal, Init, ParamSpec};
pub use params::LayerParams;
pub use tape::{logcosh, sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
}
