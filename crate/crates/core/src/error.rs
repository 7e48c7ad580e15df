use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("graph validation failed: {0}")]
    Validation(String),

    #[error("shape mismatch at node `{node}`: {msg}")]
    ShapeMismatch { node: String, msg: String },

    #[error("graph contains a cycle or out-of-order use at node `{0}`")]
    Cycle(String),

    #[error("layout primitive #{index} ({prim}): {msg}")]
    Primitive {
        index: usize,
        prim: String,
        msg: String,
    },

    #[error("access rewrite failed for tensor `{tensor}`: {msg}")]
    Rewrite { tensor: String, msg: String },

    #[error("propagation conflict on tensor `{tensor}`: claimed by `{first}` and `{second}`")]
    PropagationConflict {
        tensor: String,
        first: String,
        second: String,
    },

    #[error("loop schedule error in `{node}`: {msg}")]
    Schedule { node: String, msg: String },

    #[error("fusion conflict between `{producer}` and `{consumer}` at depth {depth}: {msg}")]
    FusionConflict {
        producer: String,
        consumer: String,
        depth: usize,
        msg: String,
    },

    #[error("out-of-range access to `{buffer}` at {indices:?} in statement {stmt}")]
    OutOfBounds {
        buffer: String,
        indices: Vec<i64>,
        stmt: String,
    },

    #[error("decode error: {0}")]
    Decode(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("json: {0}")]
    Json(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e.to_string())
    }
}
