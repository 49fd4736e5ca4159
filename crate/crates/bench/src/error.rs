use latb_core::CoreError;
use latb_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Core(CoreError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;

impl From<CoreError> for BenchError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NonFinite(m) => BenchError::Numeric(m),
            CoreError::Tensor(TensorError::NonFinite { op }) => BenchError::Numeric(format!("non-finite value in {op}")),
            other => BenchError::Core(other),
        }
    }
}

impl BenchError {
    /// Process exit code: 2 for configuration problems, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Config(_) => 2,
            BenchError::Numeric(_) => 3,
            _ => 1,
        }
    }
}

pub(crate) fn config(msg: impl Into<String>) -> BenchError {
    BenchError::Config(msg.into())
}

pub(crate) fn io(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> BenchError + '_ {
    move |source| BenchError::Io {
        path: path.display().to_string(),
        source,
    }
}
