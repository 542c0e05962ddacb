use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    Tensor(String),

    #[error("configuration error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("unknown symbol id {0}")]
    UnknownSymbol(usize),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("unregistered {what}: {name}")]
    Unregistered { what: &'static str, name: String },

    #[error("modality mismatch: expected `{expected}`, got `{got}`")]
    ModalityMismatch { expected: String, got: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint incompatible: {0}")]
    Checkpoint(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 1,
            Error::Numeric(_) => 2,
            Error::Checkpoint(_) => 3,
            _ => 1,
        }
    }
}
