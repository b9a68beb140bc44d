use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("timestep {t} outside [{lo}, {hi}]")]
    Timestep { t: usize, lo: usize, hi: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("out-of-vocabulary word {0:?}")]
    UnknownWord(String),
    #[error("caption too long: {words} words, at most {max} fit the context")]
    CaptionTooLong { words: usize, max: usize },
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("bad file format in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("unknown config key {0:?}")]
    UnknownConfigKey(String),
    #[error("config key {key:?}: cannot parse {value:?} as {expected}")]
    ConfigValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("missing tensor {0:?} in checkpoint")]
    MissingTensor(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
