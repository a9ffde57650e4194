use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("token `{token}` of category `{category}` not found in embedding table")]
    MissingToken { token: String, category: String },

    #[error("category `{category}` has a zero-norm representation vector")]
    ZeroNorm { category: String },

    #[error("invalid similarity matrix: {0}")]
    InvalidMatrix(String),

    #[error("invalid noise spec: {0}")]
    InvalidSpec(String),

    #[error("temperature search failed: {0}")]
    Solver(String),

    #[error("sampling pools exhausted: {drawn} of {requested} draws made, shortfall {}", requested - drawn)]
    PoolExhausted { requested: usize, drawn: usize },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate mixture fit: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}
