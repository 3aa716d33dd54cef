use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("{op}: every entry is masked, softmax has empty support")]
    EmptySupport { op: &'static str },

    #[error("rank error: {0}")]
    Rank(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("lookup error: field {field} index {index} outside table of {rows} rows")]
    Lookup {
        field: usize,
        index: usize,
        rows: usize,
    },

    #[error("depth plan error: {0}")]
    Plan(String),

    #[error("undefined statistics: {0}")]
    Stats(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

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
