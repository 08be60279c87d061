//! Crate-wide error type.
//!
//! Every fallible public operation returns [`Result`]. [`Error::kind`]
//! classifies failures for callers that map them onto process exit codes:
//! bad user input ([`ErrorKind::Validation`]) versus failures while doing the
//! work ([`ErrorKind::Runtime`]).

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse failure class. The CLI exits 1 for `Validation`, 2 for `Runtime`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Runtime,
}

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is outside its documented domain.
    #[error("invalid config: {0}")]
    Config(String),

    /// An operation that needs at least one item received none.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// A tag was not found in the active vocabulary.
    #[error("unknown tag `{0}`")]
    UnknownTag(String),

    /// Grid/mask dimensions do not agree.
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// An image file exists but cannot be decoded under the accepted formats.
    #[error("{path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    /// Rejection sampling for a mask ran out of attempts.
    #[error("mask generation exhausted {attempts} attempts without an acceptable mask")]
    MaskGenExhausted { attempts: usize },

    /// A mask transform left no foreground pixels.
    #[error("transform produced an empty mask")]
    DegenerateMask,

    /// Gradient-based training was requested for a closed-form denoiser.
    #[error("denoiser kind `{0}` has no trainable parameters")]
    NotTrainable(&'static str),

    /// A stored artifact does not match what the caller expects.
    #[error("artifact mismatch: {0}")]
    ArtifactMismatch(String),

    /// Wraps a failure with the pipeline stage it occurred in.
    #[error("stage `{stage}`: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    /// Wraps a failure with the batch index it occurred at.
    #[error("item {index}: {source}")]
    AtIndex {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_)
            | Error::EmptyInput(_)
            | Error::UnknownTag(_)
            | Error::NotTrainable(_) => ErrorKind::Validation,
            Error::Stage { source, .. } | Error::AtIndex { source, .. } => source.kind(),
            _ => ErrorKind::Runtime,
        }
    }

    /// Attach the pipeline stage name to an error.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Attach a batch index to an error.
    pub fn at_index(self, index: usize) -> Error {
        Error::AtIndex {
            index,
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Error {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
