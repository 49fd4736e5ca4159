//! Latent action models, toy policy, supervision strategies and the
//! synthetic manipulation environment.

pub mod action_lam;
pub mod ckpt;
pub mod codebook;
pub mod dataset;
pub mod env;
mod error;
pub mod image_lam;
pub mod policy;
pub mod strategies;

pub use error::{CoreError, Result};
