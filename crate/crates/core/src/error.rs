use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("{what} is not Hermitian (defect {defect:.3e})")]
    NotHermitian { what: &'static str, defect: f64 },

    #[error("non-finite entries in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// `b + b*` does not vanish, so the diffusion coefficient is not `-i L` with `L = L*`.
    #[error("diffusion coefficient is not skew-adjoint (defect {defect:.3e})")]
    NotSkewAdjoint { defect: f64 },

    /// `a + a* + b*b` does not vanish: the squared norm picks up a drift and
    /// cannot be a martingale.
    #[error("norm drift condition violated (defect {defect:.3e})")]
    DriftConditionViolated { defect: f64 },

    #[error("state is not normalized (norm {norm})")]
    NotNormalized { norm: f64 },

    #[error("state norm vanished at step {step}")]
    VanishingNorm { step: usize },

    #[error("one-step propagator factor {step} is singular (condition number {condition:.3e})")]
    SingularFactor { step: usize, condition: f64 },

    /// A trajectory produced a non-finite value; the step size is likely too large.
    #[error("trajectory {trajectory} blew up at step {step}")]
    BlowUp { trajectory: usize, step: usize },
}
