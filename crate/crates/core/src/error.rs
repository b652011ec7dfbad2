use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid value for `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("start grid with {n} agents does not fit inside the arena")]
    GridOutOfArena { n: usize },

    #[error("stale tape: recorded at parameter version {recorded}, parameters are at {current}")]
    StaleTape { recorded: u64, current: u64 },

    #[error("non-finite activation in layer `{0}`")]
    Activation(String),

    #[error("non-finite loss in update (epoch {epoch}, minibatch {minibatch}): {detail}")]
    Loss { epoch: usize, minibatch: usize, detail: String },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("missing series `{requested}`; available: {available:?}")]
    MissingSeries { requested: String, available: Vec<String> },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
