use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or model dimensions do not line up. `layer` is the index of the
    /// offending layer when the mismatch happens inside a model.
    #[error("shape mismatch at layer {layer:?}: expected {expected}, found {found}")]
    Shape {
        layer: Option<usize>,
        expected: String,
        found: String,
    },

    /// A numeric argument is outside its admissible range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A setup that cannot produce a valid federation (too few samples,
    /// duplicate client ids, ...).
    #[error("configuration error: {0}")]
    Configuration(String),

    /// A configuration key was unknown or had an out-of-range value.
    #[error("config key `{key}`: {message}")]
    ConfigKey { key: String, message: String },

    /// The round protocol was violated, e.g. weights that do not sum to one.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// An operation was called before the state it needs exists.
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed metrics file: {0}")]
    Metrics(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(layer: Option<usize>, expected: impl ToString, found: impl ToString) -> Self {
        Error::Shape {
            layer,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn key(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::ConfigKey {
            key: key.into(),
            message: message.into(),
        }
    }
}
