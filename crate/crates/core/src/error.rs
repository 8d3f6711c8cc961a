// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::fmt;

/// Errors produced by the generator, codec, interventions and analysis harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller supplied an argument that violates an operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A file did not follow the expected on-disk format.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    /// An inner error annotated with where it happened (path, step, file).
    /// The message already includes the inner error, so it is not exposed
    /// as a separate `source` to avoid printing it twice in error chains.
    #[error("{context}: {inner}")]
    Context { context: String, inner: Box<Error> },
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl fmt::Display) -> Self {
        Self::InvalidArgument(msg.to_string())
    }

    pub(crate) fn format(msg: impl fmt::Display) -> Self {
        Self::Format(msg.to_string())
    }

    /// Wrap `self` with a human-readable location.
    pub fn context(self, context: impl fmt::Display) -> Self {
        Self::Context { context: context.to_string(), inner: Box::new(self) }
    }

    /// The innermost error, skipping any context layers.
    pub fn root(&self) -> &Error {
        match self {
            Self::Context { inner, .. } => inner.root(),
            other => other,
        }
    }

    /// True if the innermost error is [`Error::InvalidArgument`].
    pub fn is_invalid_argument(&self) -> bool {
        matches!(self.root(), Self::InvalidArgument(_))
    }

    /// True if the innermost error is [`Error::Format`].
    pub fn is_format(&self) -> bool {
        matches!(self.root(), Self::Format(_))
    }
}

/// Attach context to the error arm of a `Result`.
pub(crate) trait ResultExt<T> {
    fn context_with<C: fmt::Display>(self, f: impl FnOnce() -> C) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn context_with<C: fmt::Display>(self, f: impl FnOnce() -> C) -> Result<T> {
        self.map_err(|e| e.context(f()))
    }
}
