use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tensor `{0}` is frozen and cannot receive gradient")]
    Frozen(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceOverflow { len: usize, max: usize },

    #[error("insertion depth {depth} out of range [1, {max}]")]
    DepthOutOfRange { depth: usize, max: usize },

    #[error("insertion depths must be strictly increasing: {0:?}")]
    DepthOrder(Vec<usize>),

    #[error("invalid request: {0}")]
    Request(String),

    #[error(
        "loss became non-finite at step {step} of stage {stage}; high learning rates on the \
         inner adaptor are known to overflow the training loss, lower the stage learning rate"
    )]
    LossOverflow { stage: String, step: usize },

    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint hash mismatch: trailer does not match header and body")]
    HashMismatch,

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
