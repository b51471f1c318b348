use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("label of length {label_len} needs at least {required} frames, utterance has {available}")]
    Unrepresentable {
        label_len: usize,
        required: usize,
        available: usize,
    },

    #[error("instance too large: {0}")]
    Size(String),

    #[error("training diverged at epoch {epoch}: mean loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("singular Fisher matrix (condition number {condition_number:e}): {detail}")]
    SingularFisher { condition_number: f64, detail: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
