use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A backend config field is missing or has the wrong shape.
    #[error("configuration error in field `{field}`: {msg}")]
    Config { field: String, msg: String },

    /// A backend descriptor parsed but violates an invariant.
    #[error("invalid backend `{backend}`: {msg}")]
    Validation { backend: String, msg: String },

    #[error("{line}:{col}: {msg}")]
    Parse {
        line: usize,
        col: usize,
        msg: String,
    },

    /// Bad input to an operation (missing tensor, wrong shape, empty list).
    #[error("{0}")]
    Precondition(String),

    #[error("bank overflow on group {group} core {core}: needs {needed} bytes, {deficit} bytes over capacity")]
    Capacity {
        group: usize,
        core: usize,
        needed: u64,
        deficit: u64,
    },

    #[error("backend `{backend}` cannot execute {what}")]
    Capability { backend: String, what: String },

    /// The draft cannot be lowered to a correct distributed schedule.
    #[error("draft not lowerable: {0}")]
    Lowering(String),

    /// The simulator hit a state only a compiler bug can produce.
    #[error("simulation fault at command {index}: {msg}")]
    Fault { index: usize, msg: String },

    #[error("malformed artifact: {0}")]
    Artifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    /// True for errors that indicate a bug in the compiler rather than bad user input.
    pub fn is_internal(&self) -> bool {
        matches!(self, Error::Fault { .. })
    }
}
