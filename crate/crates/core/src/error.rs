use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MmsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MmsError {
    /// Input data violates a type invariant (non-binary label, NaN, shape mismatch).
    #[error("validation error: {0}")]
    Validation(String),

    /// A configuration or call parameter is out of its allowed range.
    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("failed to load {what}: {reason}")]
    Load { what: String, reason: String },

    #[error("integrity error in {path}: {reason}")]
    Integrity { path: PathBuf, reason: String },

    #[error("incompatible checkpoint {path}: expected config digest {expected}, found {found}")]
    Incompatible {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("loss component `{component}` is not finite ({value})")]
    NonFiniteLoss { component: String, value: f64 },

    /// A loss component went non-finite during training.
    #[error("training aborted at epoch {epoch}, step {step}: component `{component}` is {value}")]
    TrainingAbort {
        component: String,
        epoch: usize,
        step: usize,
        value: f64,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("image error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl MmsError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MmsError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            MmsError::Validation(_)
                | MmsError::Parameter(_)
                | MmsError::Shape(_)
                | MmsError::Split(_)
                | MmsError::Dataset(_)
                | MmsError::Config(_)
        )
    }
}
