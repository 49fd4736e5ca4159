//! Config-driven runner: dataset generation, latent model and policy
//! training, evaluation and ablation suites with CSV reports.

pub mod cli;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod suites;

pub use config::Config;
pub use error::{BenchError, Result};
