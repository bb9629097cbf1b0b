//! Crate-wide error type.

use thiserror::Error;

use crate::solver::GameSolution;
use crate::strategy::Strategy;

/// Everything that can go wrong across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    /// The tally space for (c, q) is larger than the configured cap.
    #[error("tally space too large: {count} compositions exceed cap {cap}")]
    TallyCapExceeded { count: u128, cap: usize },

    #[error("invalid bias vector: {0}")]
    InvalidBias(String),

    #[error("invalid tally: {0}")]
    InvalidTally(String),

    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),

    #[error("invalid bias distribution: {0}")]
    InvalidDistribution(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A payoff term divides by a vanishing g_y that the map does not
    /// declare as boundary-vanishing.
    #[error("singular payoff term: g_{symbol} = 0 with non-vanishing gradient")]
    Singularity { symbol: usize },

    #[error("best response did not converge: gap {gap:.3e} after {iterations} iterations")]
    BestResponseNonConvergence {
        gap: f64,
        iterations: u64,
        best: Box<Strategy>,
    },

    #[error("game solver did not converge: gap {gap:.3e} after {rounds} rounds")]
    SolverNonConvergence {
        gap: f64,
        rounds: u32,
        best: Box<GameSolution>,
    },

    #[error("bias support cap {cap} exceeded with gap {gap:.3e}")]
    SupportCapExceeded {
        cap: usize,
        gap: f64,
        best: Box<GameSolution>,
    },

    #[error("size cap exceeded: {0}")]
    SizeCap(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
