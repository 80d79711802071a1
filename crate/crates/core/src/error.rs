use thiserror::Error;

/// Errors raised across the crate. Each variant maps to a process exit code
/// so the CLI can report failures uniformly.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("unknown task id {0}")]
    UnknownTask(usize),

    #[error("degenerate split: task {task} gets zero samples in part {part}")]
    DegenerateSplit { task: usize, part: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("empty fit: {0}")]
    EmptyFit(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("capability error: {0}")]
    Capability(String),

    #[error("empty evaluation: {0}")]
    EmptyEval(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit code for the CLI: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Schema(_) | Error::UnknownTask(_) | Error::Capability(_) => 2,
            Error::Parse { .. }
            | Error::DegenerateSplit { .. }
            | Error::Contract(_)
            | Error::EmptyFit(_)
            | Error::EmptyEval(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
