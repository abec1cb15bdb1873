use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("training diverged in epoch {epoch}: non-finite loss")]
    Divergence { epoch: usize },

    #[error("non-finite gradient from learner {learner} (seq {seq_no})")]
    NonFiniteGradient { learner: usize, seq_no: u64 },

    #[error("invalid workload profile: {0}")]
    InvalidProfile(String),

    #[error("fixture {path}: {msg}")]
    Fixture { path: PathBuf, msg: String },

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("run failed: {0}")]
    Run(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
