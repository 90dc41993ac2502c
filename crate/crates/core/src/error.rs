use thiserror::Error;

/// Errors raised across the preprocessing, modelling and evaluation stages.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("non-finite value in {location} at ({row}, {col})")]
    NonFinite {
        location: &'static str,
        row: usize,
        col: usize,
    },

    #[error("record for patient {patient} is too short: {detail}")]
    EmptyCohort { patient: String, detail: String },

    #[error("channel {channel} has no entry in the range table")]
    MissingRange { channel: String },

    #[error("channel {channel} has no observed values to interpolate from")]
    Unrecoverable { channel: String },

    #[error("modalities of patient {patient} have no overlapping time span")]
    NoOverlap { patient: String },

    #[error("patient {patient} has incomplete labels")]
    MissingLabels { patient: String },

    #[error("{metric} is undefined: {reason}")]
    Metric { metric: &'static str, reason: String },

    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("parse error in {source_name} line {line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(vec![msg.into()])
    }

    pub fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "numeric",
            Error::EmptyCohort { .. } => "empty_cohort",
            Error::MissingRange { .. } => "missing_range",
            Error::Unrecoverable { .. } => "unrecoverable_channel",
            Error::NoOverlap { .. } => "no_overlap",
            Error::MissingLabels { .. } => "missing_labels",
            Error::Metric { .. } => "metric",
            Error::Diverged { .. } => "diverged",
            Error::Dataset(_) => "dataset",
            Error::Checkpoint(_) => "checkpoint",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
