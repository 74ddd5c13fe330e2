use std::path::PathBuf;

use crate::cluster::{Axis, Collective};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("no bandwidth curve for {op} on the {axis} axis")]
    MissingCurve { op: Collective, axis: Axis },

    #[error("invalid bandwidth profile: {0}")]
    InvalidProfile(String),

    #[error("invalid model config: {}", .0.join("; "))]
    InvalidModel(Vec<String>),

    #[error("invalid cluster config: {}", .0.join("; "))]
    InvalidCluster(Vec<String>),

    #[error("strategy is infeasible: {}", .0.join("; "))]
    InfeasibleStrategy(Vec<String>),

    #[error("no profiled compute entry for b={micro_batch}, tokens={tokens}, hidden={hidden}")]
    MissingComputeEntry { micro_batch: u64, tokens: u64, hidden: u64 },

    #[error("invalid compute model: {0}")]
    InvalidComputeModel(String),

    #[error("rank {rank} is out of range for a report with {len} plans")]
    RankOutOfRange { rank: usize, len: usize },

    #[error("invalid trace: {0}")]
    InvalidTrace(String),

    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("config validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("unknown model preset `{0}` (expected one of 7b, 13b, 30b, 65b)")]
    UnknownPreset(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
