use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("invalid axis {axis} for shape {shape:?}")]
    Axis { axis: usize, shape: Vec<usize> },

    #[error("rank {rank} exceeds min(m, n) = min({m}, {n})")]
    RankTooLarge { rank: usize, m: usize, n: usize },

    #[error("variant mismatch: {op} does not accept {variant}")]
    Variant { op: &'static str, variant: String },

    #[error("adapter state error: {0}")]
    State(String),

    #[error("not mergeable: {reason}")]
    NotMergeable { reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("alignment needs at least two tasks, got {0}")]
    NeedsTwoTasks(usize),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("degenerate head {0}: zero norm")]
    DegenerateHead(usize),

    #[error("checkpoint decode error: {0}")]
    Decode(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::Domain { .. })
    }
}
