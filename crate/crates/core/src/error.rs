use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {op} got {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape for {op}: {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("NaN encountered in input to {0}")]
    NanInput(&'static str),
    #[error("attention query row {0} has no allowed keys")]
    FullyMaskedQuery(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("stream already flushed; no further pushes accepted")]
    StreamFlushed,
    #[error("weight file error: {0}")]
    WeightFormat(String),
    #[error("feature file error: {0}")]
    FeatureFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
