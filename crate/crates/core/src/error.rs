use thiserror::Error;

use crate::binarize::BinarizerKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("BN folding unsupported for {0} scale granularity")]
    FoldUnsupported(String),

    #[error("mixed units: {0}")]
    MixedUnits(String),

    #[error("zero denominator: {0}")]
    ZeroDenominator(String),

    #[error("{algorithm}: {source}")]
    Algorithm {
        algorithm: BinarizerKind,
        #[source]
        source: Box<Error>,
    },

    #[error("layer {index}: {source}")]
    Layer {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn in_layer(self, index: usize) -> Self {
        Error::Layer {
            index,
            source: Box::new(self),
        }
    }

    pub(crate) fn in_algorithm(self, algorithm: BinarizerKind) -> Self {
        match self {
            e @ Error::Algorithm { .. } => e,
            e => Error::Algorithm {
                algorithm,
                source: Box::new(e),
            },
        }
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
