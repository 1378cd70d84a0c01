use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("{op}: shape mismatch, expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("expected rank {expected}, found rank {found}")]
    RankMismatch { expected: usize, found: usize },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("{0}")]
    Precondition(String),
    #[error("backward called on a graph that was already consumed")]
    GraphConsumed,
    #[error("backward requires a scalar loss, found shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("attempt to update frozen parameter {0}")]
    FrozenUpdate(String),
    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGrad(String),
    #[error("no positive cells for {0}")]
    NoPositives(&'static str),
    #[error("type-id `{0}` has no aligner/prompt pair")]
    MissingPair(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot place {requested} objects after {attempts} attempts")]
    PlacementFailed { requested: usize, attempts: usize },
    #[error("non-deterministic function under gradient check")]
    NonDeterministic,
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
}
