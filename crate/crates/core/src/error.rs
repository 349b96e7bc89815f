use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("length mismatch: grid has {grid} nodes, series has {series}")]
    LengthMismatch { grid: usize, series: usize },

    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("invalid sigma grid: {0}")]
    InvalidGrid(String),

    #[error("invalid operator: {0}")]
    InvalidOperator(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A signal coordinate is never observed by any probed operator, so
    /// E[P] is singular there.
    #[error("span violation: coordinate {coordinate} is never observed in {draws} operator draws")]
    SpanViolation { coordinate: usize, draws: usize },

    /// Two operators (or an operator and the projection statistics) disagree
    /// on the right singular basis.
    #[error("basis mismatch: expected basis {expected:016x}, found {found:016x}")]
    BasisMismatch { expected: u64, found: u64 },

    #[error("projection statistics were estimated from a different sampler")]
    SamplerMismatch,

    #[error("operator {index} is rank deficient")]
    RankDeficient { index: u64 },

    #[error("denoiser requested at sigma = 0")]
    ZeroNoiseDenoise,

    #[error("adaptation diverged at step {step}: loss rose for {window} consecutive steps (last {loss})")]
    Divergence { step: usize, window: usize, loss: f64 },
}

impl Error {
    /// Violations of the measurement-model assumptions (spanning operators,
    /// shared right basis) as opposed to malformed input.
    pub fn is_assumption_violation(&self) -> bool {
        matches!(
            self,
            Error::SpanViolation { .. }
                | Error::BasisMismatch { .. }
                | Error::SamplerMismatch
                | Error::RankDeficient { .. }
        )
    }
}
