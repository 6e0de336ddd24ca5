use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input file could not be parsed; `location` is a JSON path or line number.
    #[error("format error in {path}: {location}: {message}")]
    Format {
        path: PathBuf,
        location: String,
        message: String,
    },

    /// A record parsed but violates a data invariant.
    #[error("corrupt record {record_id}: {message}")]
    CorruptRecord { record_id: String, message: String },

    #[error("schema version mismatch in {path}: expected {expected}, found {found}")]
    SchemaVersion {
        path: PathBuf,
        expected: u32,
        found: String,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    /// Not enough data points to fit the requested number of components.
    #[error("insufficient data: need at least {needed} values, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("transport error{}: {message}", passage_suffix(.passage_id))]
    Transport {
        message: String,
        retriable: bool,
        passage_id: Option<String>,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("generation error for passage {passage_id}: {message}")]
    Generation { passage_id: String, message: String },

    #[error("finetune job error: {0}")]
    Job(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn passage_suffix(id: &Option<String>) -> String {
    match id {
        Some(id) => format!(" (passage {id})"),
        None => String::new(),
    }
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn is_transport(&self) -> bool {
        matches!(self, Error::Transport { .. })
    }

    /// Attach a passage id to transport errors that lack one.
    pub fn with_passage(self, id: &str) -> Self {
        match self {
            Error::Transport {
                message,
                retriable,
                passage_id: None,
            } => Error::Transport {
                message,
                retriable,
                passage_id: Some(id.to_string()),
            },
            other => other,
        }
    }
}
