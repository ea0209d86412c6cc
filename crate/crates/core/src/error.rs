use std::path::PathBuf;

/// Errors produced by every stage of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("class directory `{0}` contains no images")]
    EmptyClass(String),

    #[error("class `{class}` has {available} images but the episode needs {needed}")]
    InsufficientImages {
        class: String,
        needed: usize,
        available: usize,
    },

    #[error("need at least {needed} classes, found {available}")]
    TooFewClasses { needed: usize, available: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid permutation set: {0}")]
    PermutationSet(String),

    #[error("malformed {what} at line {line}, column {column}: {message}")]
    Parse {
        what: &'static str,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}: supervised={supervised}, self-supervised={self_supervised}")]
    NonFiniteLoss {
        step: usize,
        supervised: f64,
        self_supervised: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(what: &'static str, err: &serde_json::Error) -> Self {
        Error::Parse {
            what,
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
