use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Bad user input: configs, scene specs, arguments.
    #[error("invalid input: {0}")]
    Validation(String),
    #[error(transparent)]
    Core(#[from] pairsplat::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed {format} at byte {offset}: {message}")]
    Parse {
        format: &'static str,
        offset: usize,
        message: String,
    },
    #[error("training diverged at step {step} (loss {loss}); diagnostics in {dump:?}")]
    Diverged {
        step: usize,
        loss: f64,
        dump: Option<PathBuf>,
    },
}

impl HarnessError {
    pub fn validation(msg: impl Into<String>) -> Self {
        HarnessError::Validation(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by the caller's input rather than by the run itself.
    pub fn is_validation(&self) -> bool {
        matches!(self, HarnessError::Validation(_))
    }
}
