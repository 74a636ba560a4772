use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("Riccati iteration did not converge after {0} iterations (not stabilizable or ill-conditioned)")]
    NotStabilizable(usize),
    #[error("invariant set did not finitely determine within {0} preimage steps")]
    InvariantSet(usize),
    #[error("Slater condition failed: {0}")]
    Slater(String),
    #[error("certificate failed: {0}")]
    Certificate(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
}

pub type Result<T> = std::result::Result<T, Error>;
