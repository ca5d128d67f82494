use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },

    #[error("invalid feeder: {0}")]
    Feeder(String),

    #[error("feeder graph is disconnected: {0}")]
    Disconnected(String),

    #[error("invalid edit: {0}")]
    Edit(String),

    #[error("graph construction: {0}")]
    Graph(String),

    #[error("singular nodal system for scenario {scenario}: pivot {pivot:e} at row {row}")]
    Singular {
        scenario: String,
        row: usize,
        pivot: f64,
    },

    #[error("invalid scenario: {0}")]
    Scenario(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("channel {channel} has zero standard deviation")]
    ZeroStd { channel: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("configuration: {0}")]
    Config(String),

    #[error("eigensolver did not converge after {0} sweeps")]
    NoConvergence(usize),

    #[error("format: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
