use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid shapes, channel counts, strides or hyper-parameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// Bad caller-supplied data (labels, indices).
    #[error("input error: {0}")]
    Input(String),

    /// One or more searchable layers rejected an architecture.
    #[error("invalid architecture: {}", format_layer_errors(.0))]
    InvalidArch(Vec<(usize, String)>),

    /// A latency table has no entry for an operator the space needs.
    #[error("latency table has no entry for {0}")]
    MissingLatency(String),

    /// A value left the domain of a function (e.g. log of latency <= 1us).
    #[error("domain error: {0}")]
    Domain(String),

    /// NaN/Inf or exploding loss during training.
    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("failed to parse {path}: {reason} (byte offset {offset})")]
    Parse {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn format_layer_errors(errors: &[(usize, String)]) -> String {
    errors
        .iter()
        .map(|(layer, reason)| format!("layer {layer}: {reason}"))
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}

macro_rules! config_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Config(format!($($arg)*))
    };
}
pub(crate) use config_err;
