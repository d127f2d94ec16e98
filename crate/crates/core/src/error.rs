use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite {what} passed to model `{model}`")]
    NonFinite { model: String, what: &'static str },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("spline has no knots")]
    EmptyKnots,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("regularization exceeded its upper bound ({0:e})")]
    Regularization(f64),

    #[error("non-finite value in {0}")]
    Diverged(&'static str),

    #[error("task config parse error: {0}")]
    Parse(String),
}

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected,
            got,
        })
    }
}
