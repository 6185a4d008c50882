use std::path::PathBuf;

use sarfah_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
    #[error("fit failed: {0}")]
    FitFailure(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Decode { path: PathBuf, detail: String },
    #[error("empty corpus: {0} readable images")]
    EmptyCorpus(usize),
    #[error("config: {0}")]
    Config(String),
    #[error("training diverged at step {step} (lr {lr:.3e}, grad norm {grad_norm:.3e}): loss {loss}")]
    Diverged {
        step: usize,
        lr: f64,
        grad_norm: f64,
        loss: f64,
    },
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn domain(detail: impl Into<String>) -> CoreError {
    CoreError::Domain(detail.into())
}
