use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix is indefinite (minimum eigenvalue {min_eig:e})")]
    IndefiniteInput { min_eig: f64 },

    #[error("conditioning block is singular")]
    SingularBlock,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("A_{step} is singular")]
    SingularA { step: usize },

    #[error("invalid Gramian window ({k1}, {k0}): need k0 < k1 <= N")]
    BadWindow { k1: usize, k0: usize },

    #[error("step index {step} outside horizon {horizon}")]
    StepOutOfRange { step: usize, horizon: usize },

    #[error("gate matrix I + B'ΠB is not positive definite at step {step}")]
    GateNotPd { step: usize },

    #[error("epsilon must be positive, got {0}")]
    NonpositiveEpsilon(f64),

    #[error("{0} Gramian is singular")]
    SingularGramian(&'static str),

    #[error("problem is infeasible: {0}")]
    InfeasibleProblem(String),

    #[error("minus-branch gate is not positive definite at step {step}")]
    BranchDegenerate { step: usize },

    #[error("{0} is not positive definite")]
    NotPositiveDefinite(&'static str),

    #[error("expected a 2-dimensional covariance, got dimension {0}")]
    NotTwoDimensional(usize),

    #[error("sample count must be positive")]
    EmptyEnsemble,
}
