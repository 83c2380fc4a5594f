use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LosaError>;

#[derive(Debug, Error)]
pub enum LosaError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("rank {rank} exceeds min(c_out, c_in) = {max}")]
    RankTooLarge { rank: usize, max: usize },

    #[error("infeasible sparsity budget: mean {theta} outside feasible range [{min}, {max}]")]
    InfeasibleBudget { theta: f64, min: f64, max: f64 },

    #[error("unachievable N:M mean sparsity {mean} with group size {m}")]
    UnachievableNm { mean: f64, m: usize },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<LosaError>,
    },

    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl LosaError {
    pub(crate) fn at_step(self, step: usize) -> Self {
        LosaError::Step {
            step,
            source: Box::new(self),
        }
    }

    /// The innermost error, with step context peeled off.
    pub fn root(&self) -> &LosaError {
        match self {
            LosaError::Step { source, .. } => source.root(),
            other => other,
        }
    }
}
