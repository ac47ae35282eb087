use thiserror::Error;

/// Errors raised by the hypercube diffusion machinery.
#[derive(Debug, Error)]
pub enum Error {
    #[error("negative time {0}")]
    NegativeTime(f64),

    #[error("invalid dimension {dim}: {reason}")]
    Dimension { dim: u32, reason: &'static str },

    #[error("state {bits:#b} does not fit in {dim} bits")]
    StateOutOfRange { bits: u64, dim: u32 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("state {bits:#b} has zero probability mass; its score is undefined")]
    ZeroMass { bits: u64 },

    #[error("score envelope is infinite at forward time 0 without a ratio bound")]
    InfiniteRate,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(
        "rate bound violated in interval {interval} at reverse time {time}: \
         state {state:#b} has total rate {total_rate} > lambda {lambda}"
    )]
    RateBound {
        state: u64,
        time: f64,
        interval: usize,
        total_rate: f64,
        lambda: f64,
    },

    #[error("invalid generator: {0}")]
    InvalidGenerator(String),

    #[error("negative mass {mass} at state {state} (t = {time}); step size too coarse")]
    NegativeMass { state: usize, time: f64, mass: f64 },

    #[error("query time {t} outside the table's range [{lo}, {hi}]")]
    TimeOutOfRange { t: f64, lo: f64, hi: f64 },

    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
