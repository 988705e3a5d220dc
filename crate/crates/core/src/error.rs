use crate::dag::TransactionId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum Error {
    #[error("unknown parent transaction {0}")]
    UnknownParent(TransactionId),
    #[error("unknown transaction {0}")]
    UnknownTransaction(TransactionId),
    #[error("empty input")]
    EmptyInput,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("architecture mismatch: {0:?} vs {1:?}")]
    ArchitectureMismatch(Vec<usize>, Vec<usize>),
    #[error("invalid class partition: {0}")]
    InvalidPartition(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid class {class} (num_classes = {num_classes})")]
    InvalidClass { class: usize, num_classes: usize },
    #[error("no samples of the flipped classes")]
    NoRelevantSamples,
    #[error("graph has no edges")]
    EmptyGraph,
    #[error("no approval edges")]
    NoEdges,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}
