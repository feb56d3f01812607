use std::path::PathBuf;

use mid_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MidError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("metric: {0}")]
    Metric(String),
    #[error("image `{}`: {source}", path.display())]
    Image { path: PathBuf, source: image::ImageError },
    #[error("`{}`: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("non-finite {what} at epoch {epoch}, iteration {iteration}")]
    NonFinite { what: &'static str, epoch: usize, iteration: usize },
}

pub type Result<T, E = MidError> = std::result::Result<T, E>;

impl MidError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> MidError {
        let path = path.into();
        move |source| MidError::Io { path, source }
    }

    /// Configuration problems map to a distinct CLI exit status.
    pub fn is_config(&self) -> bool {
        matches!(self, MidError::Config(_))
    }
}
