//! Dense tensors, reverse-mode autodiff, a few neural layers and Adam.

mod adam;
mod error;
mod gradcheck;
mod graph;
pub mod nn;
mod params;
mod real;
mod tensor;

pub use adam::Adam;
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_params};
pub use graph::{gelu, Graph, Var, MASKED};
pub use params::{
    read_checkpoint, write_checkpoint, Init, Param, ParamGrads, ParamId, ParamStore,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use real::Real;
pub use tensor::Tensor;
