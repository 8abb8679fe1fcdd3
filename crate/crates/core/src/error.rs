use thiserror::Error;

use crate::estimators::FitResult;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter out of domain: {0}")]
    ParameterDomain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("scale error: {0}")]
    Scale(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("under-identified: {scales} scales for {params} parameters")]
    UnderIdentified { scales: usize, params: usize },

    /// Every multi-start failed to converge. Carries the best point found.
    #[error("optimizer did not converge: {message}")]
    Convergence {
        message: String,
        best: Option<Box<FitResult>>,
    },

    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),

    #[error("ill-conditioned weighting matrix: {0}")]
    Conditioning(String),

    #[error("singular H matrix (equilibrated condition number {condition:.3e})")]
    SingularHessian { condition: f64 },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("unreliable test: {failed} of {total} bootstrap refits failed")]
    UnreliableTest { failed: usize, total: usize },

    #[error("noise source exhausted: {0}")]
    DataExhausted(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Convergence { .. }
                | Error::Numerical(_)
                | Error::SingularHessian { .. }
                | Error::Conditioning(_)
                | Error::UnreliableTest { .. }
        )
    }
}
