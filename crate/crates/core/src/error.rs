use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("inadmissible medium: {0}")]
    Inadmissible(String),

    #[error("source iteration stalled after {iterations} iterations (last update {residual:.3e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate design: {0}")]
    Degenerate(String),

    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),

    #[error("line search failed at iteration {iteration} after {halvings} halvings")]
    LineSearch { iteration: usize, halvings: usize },

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            Error::Convergence { .. } | Error::LinearAlgebra(_) | Error::LineSearch { .. }
        )
    }
}
