use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid hyperparameters or network configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Operands whose shapes violate an operation's contract.
    #[error("shape contract violated: {0}")]
    Shape(String),

    /// A NaN or infinity appeared where finite values are required.
    #[error("numeric fault: {0}")]
    NumericFault(String),

    #[error("sampling failed at diffusion step {step}: {reason}")]
    SamplingStep { step: usize, reason: String },

    /// A failure inside a batch of samples, tagged with which sample failed.
    #[error("sample for condition {condition} replicate {replicate} failed: {source}")]
    Replicate {
        condition: usize,
        replicate: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("cascade {stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    /// Dataset records that failed validation, one diagnostic per problem.
    #[error("dataset validation failed:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image { path: path.into(), source }
    }

    /// True for errors caused by bad inputs rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Shape(_) | Error::Validation(_))
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<toml::ser::Error> for Error {
    fn from(e: toml::ser::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
