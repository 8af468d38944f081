use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("softmax: row {row} is fully masked")]
    DegenerateRow { row: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    Vocabulary { id: usize, vocab: usize },

    #[error("loss mask selects no positions")]
    EmptyLoss,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid problem: {0}")]
    Task(String),

    #[error("problem space exhausted: wanted {wanted}, only {available} unseen problems available")]
    Exhausted { wanted: usize, available: usize },

    #[error("non-finite loss at iteration {iteration}: {snapshot}")]
    NonFiniteLoss { iteration: usize, snapshot: String },

    #[error("sequence layout mismatch: {0}")]
    Layout(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
