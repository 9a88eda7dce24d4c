use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("kernel size must be odd, got {0}")]
    EvenKernel(usize),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("graph already consumed by a backward pass; record a new forward")]
    GraphConsumed,
    #[error("no gradient available: backward has not run on this graph")]
    NoGradient,
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("block {layer}: mode is {actual} but schedule requires {expected} at epoch {epoch}")]
    ModeMismatch {
        layer: usize,
        epoch: u32,
        expected: String,
        actual: String,
    },
    #[error("block {0}: active mixer is missing")]
    MissingMixer(usize),
    #[error("schedule: {0}")]
    Schedule(String),
    #[error("tensor file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        msg: msg.into(),
    }
}
