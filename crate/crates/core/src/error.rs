use crate::score_net::ModelParams;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("non-finite value during {stage}: {detail}")]
    NonFinite { stage: &'static str, detail: String },

    /// Training produced a non-finite loss. `last_good` holds the parameters
    /// from the last step whose loss was finite.
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged {
        step: usize,
        loss: f64,
        last_good: Box<ModelParams>,
    },

    #[error("degenerate saliency map: {0}")]
    DegenerateMask(String),

    #[error("singular fusion system: Gram matrix has rank {rank} < {dim} and beta = 0")]
    SingularSystem { rank: usize, dim: usize },

    #[error("parse error in {what} at line {line}: {detail}")]
    Parse {
        what: &'static str,
        line: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn parse(what: &'static str, line: usize, detail: impl Into<String>) -> Self {
        Error::Parse {
            what,
            line,
            detail: detail.into(),
        }
    }

    /// True for errors caused by bad user input rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::InvalidInput(_) | Error::Parse { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
