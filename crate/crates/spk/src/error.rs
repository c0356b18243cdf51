//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("batch key {key:?} not found; available keys: [{available}]")]
    KeyMissing { key: String, available: String },

    #[error("batch key {key:?} holds {found}, expected {expected}")]
    KeyType {
        key: String,
        expected: &'static str,
        found: &'static str,
    },

    #[error("invalid argument for {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("non-finite value in {what}{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite { what: String, step: Option<u64> },

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown config key {key:?}{}", suggestion.as_ref().map(|s| format!("; did you mean {s:?}?")).unwrap_or_default())]
    UnknownKey {
        key: String,
        suggestion: Option<String>,
    },

    #[error("unknown {kind} {name:?}; registered: [{known}]")]
    Registry {
        kind: &'static str,
        name: String,
        known: String,
    },

    #[error("checkpoint {section} section: {reason}")]
    Checkpoint { section: String, reason: String },

    #[error("training aborted at step {step}: {reason}{}", last_good.as_ref().map(|p| format!("; last good checkpoint: {p}")).unwrap_or_default())]
    TrainAbort {
        step: u64,
        reason: String,
        last_good: Option<String>,
    },

    #[error("resume refused: {0}")]
    ResumeRefused(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }

    pub fn checkpoint(section: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Checkpoint {
            section: section.into(),
            reason: reason.into(),
        }
    }
}
