use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] pod_core::Error),

    #[error("cannot parse config: {0}")]
    ConfigParse(String),

    #[error("missing {artifact} at {path}: run stage {stage} first")]
    MissingArtifact {
        artifact: &'static str,
        path: PathBuf,
        stage: &'static str,
    },

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}: {message}")]
    Artifact { path: PathBuf, message: String },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::ConfigParse(_) => "config_parse",
            CliError::MissingArtifact { .. } => "missing_artifact",
            CliError::Io { .. } => "io",
            CliError::Artifact { .. } => "artifact",
        }
    }

    /// Process exit code: 2 for configuration problems, 3 for missing
    /// upstream stages, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ConfigParse(_) | CliError::Core(pod_core::Error::Config(_)) => 2,
            CliError::MissingArtifact { .. } => 3,
            _ => 1,
        }
    }

    /// Single line `error kind=<kind> message=<text>` with newlines and tabs
    /// flattened.
    pub fn render_line(&self) -> String {
        let msg: String = self
            .to_string()
            .chars()
            .map(|c| if c == '\n' || c == '\t' || c == '\r' { ' ' } else { c })
            .collect();
        format!("error kind={} message={msg}", self.kind())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
