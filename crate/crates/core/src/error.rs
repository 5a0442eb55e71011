use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("target of length {target_len} is infeasible with {frames} frames (needs {required})")]
    Infeasible {
        frames: usize,
        target_len: usize,
        required: usize,
    },
    #[error("oracle scale exceeded: {0}")]
    OracleScale(String),
    #[error("unknown token(s): {0:?}")]
    UnknownToken(Vec<String>),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("divergence in stage {stage} at step {step}: {detail}")]
    Divergence {
        stage: usize,
        step: usize,
        detail: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
