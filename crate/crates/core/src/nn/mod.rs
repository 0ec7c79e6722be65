//! Minimal differentiable numerical core.
//!
//! Everything here is explicit forward/backward pairs over `ndarray` storage
//! in double precision. There is no tape: each layer owns its backward rule,
//! which keeps the arithmetic auditable against finite differences.

mod check;
mod model_file;
mod ops;
mod param;

pub use check::grad_check;
pub use model_file::{load_params, load_params_into, save_params, NamedTensor, ParamHeader, MODEL_MAGIC};
pub use ops::{
    affine_bwd, affine_fwd, affine_seq_bwd, affine_seq_fwd, pnorm_bwd, pnorm_fwd, sigmoid,
    softmax, softmax_xent,
};
pub use param::{param_rng, ParamRefMut,
    
    flatten_grads, flatten_values, nudge_value, num_coords, set_values, zero_grads, ParamMat,
    ParamRef, ParamSet, ParamVec,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("input dim {dim} not divisible by group size {group}")]
    BadGroupSize { dim: usize, group: usize },
    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),
    #[error("model file: {0}")]
    ModelFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;
