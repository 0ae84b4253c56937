use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid specification: {0}")]
    Spec(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    /// The A-step system `A·C = B` stayed singular after regularization.
    #[error("degenerate model: {0}")]
    DegenerateModel(String),

    /// The D-step Gram matrix `H` is singular (rank-deficient or collinear mixing columns).
    #[error("degenerate mixing matrix: {0}")]
    DegenerateMixing(String),

    #[error("degenerate gain matrix: {0}")]
    DegenerateGain(String),

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at(self, iteration: usize) -> Self {
        Error::AtIteration {
            iteration,
            source: Box::new(self),
        }
    }

    /// Strips any iteration annotation.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtIteration { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for failures of the numerical model itself, as opposed to bad input or I/O.
    pub fn is_degeneracy(&self) -> bool {
        matches!(
            self.root(),
            Error::DegenerateModel(_)
                | Error::DegenerateMixing(_)
                | Error::DegenerateGain(_)
                | Error::DegenerateInput(_)
                | Error::Numeric(_)
        )
    }
}
