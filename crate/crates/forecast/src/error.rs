use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {field}: {msg}")]
    Schema {
        line: usize,
        field: &'static str,
        msg: String,
    },

    #[error("line {line}: malformed JSON: {msg}")]
    Json { line: usize, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("split infeasible: class {class} needs {requested} scenes, only {available} available")]
    SplitShortfall {
        class: String,
        requested: usize,
        available: usize,
    },

    #[error("training aborted: non-finite loss in epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },

    #[error(transparent)]
    Grad(#[from] ndgrad::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
