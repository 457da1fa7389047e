//! Error type shared by every module of the crate.

use thiserror::Error;

use crate::steering::SteerStep;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("invalid unembedding head: {0}")]
    InvalidHead(String),

    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    // --- LTRJ format ---
    #[error("bad magic: expected \"LTRJv001\", found {0:?}")]
    BadMagic([u8; 8]),

    #[error("truncated input while reading {0}")]
    Truncated(&'static str),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("malformed header: {0}")]
    Header(String),

    #[error("realized probability at step {index} is {value}, outside (0, 1]")]
    ProbabilityOutOfRange { index: usize, value: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    // --- mechanics ---
    #[error("degenerate dynamics: zero velocity")]
    DegenerateDynamics,

    #[error("probability {0} is not in (0, 1]")]
    InvalidProbability(f64),

    #[error("{what}: need at least {needed}, got {got}")]
    TooShort {
        what: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("undefined statistic: {0}")]
    UndefinedStatistic(&'static str),

    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),

    #[error("at step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    // --- variational ---
    #[error("singular dynamics: 2v/|v|^2 +/- grad vanishes")]
    SingularDynamics,

    #[error("direction is not a unit vector (norm {0})")]
    NonUnitDirection(f64),

    // --- steering ---
    #[error("invalid steering parameters: {0}")]
    InvalidParams(String),

    #[error("line search stalled at iteration {iteration} after {} accepted steps", path.len())]
    SteeringStalled { iteration: usize, path: Vec<SteerStep> },

    #[error("gradient saturated (|g| < 1e-12) with target probability {p_target} below threshold")]
    SaturatedGradient { p_target: f64 },

    #[error("steering direction is zero")]
    ZeroGradient,

    #[error("minimal-action bound violated: sampled norm {sampled} < optimal norm {optimal}")]
    OptimalityViolated { sampled: f64, optimal: f64 },

    #[error("trajectory has no unembedding head attached")]
    MissingHead,
}

impl Error {
    pub(crate) fn at_step(step: usize, source: Error) -> Self {
        Error::AtStep {
            step,
            source: Box::new(source),
        }
    }
}
