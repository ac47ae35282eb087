//! Discrete diffusion on the Boolean hypercube `{0,1}^d`.
//!
//! The forward process flips each coordinate independently at unit rate. This
//! crate provides its exact marginals and scores, the score-entropy losses,
//! an exact reverse sampler built on uniformization, tabular score training,
//! and dense reference solvers used to check all of the above.

// Negated comparisons are how NaN parameters get rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod hypercube;
pub mod losses;
pub mod oracle;
pub mod sampler;
pub mod score;
pub mod train;

pub use error::{Error, Result};
pub use hypercube::{DenseDistribution, HypercubeState, RatioMode, ScoreVector};
pub use losses::{LossReport, NoisedPair};
pub use sampler::{ReverseSampler, SamplerConfig};
pub use score::{ConstantScore, ExactScore, ScoreFn};
pub use train::{ScoreTable, TrainConfig, TrainReport};
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
