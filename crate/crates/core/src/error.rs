//! Error type shared across the pipeline crates.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SeasError {
    #[error("config error: {0}")]
    Config(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("artifact incompatibility: {0}")]
    Compatibility(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training diverged at step {step}: non-finite {term}")]
    Divergence { step: usize, term: String },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl SeasError {
    /// Stable machine-readable class used by the CLI for exit codes and
    /// error lines.
    pub fn class(&self) -> &'static str {
        match self {
            SeasError::Config(_) => "config",
            SeasError::Validation(_) => "validation",
            SeasError::Range(_) => "range",
            SeasError::Dimension(_) => "dimension",
            SeasError::Data(_) => "data",
            SeasError::Compatibility(_) => "compatibility",
            SeasError::MissingArtifact(_) => "missing-artifact",
            SeasError::NonFinite(_) => "non-finite",
            SeasError::Divergence { .. } => "divergence",
            SeasError::Parse { .. } => "parse",
            SeasError::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, SeasError>;
