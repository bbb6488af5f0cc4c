use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    Parameter { field: &'static str, reason: String },

    #[error("step index {index} out of range [{min}, {max}]")]
    Index { index: usize, min: usize, max: usize },

    #[error("timestep ordering violated: t_prev={t_prev} must be < t={t}")]
    Ordering { t: usize, t_prev: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("unknown {kind} `{name}`")]
    Lookup { kind: &'static str, name: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("divergence at iteration {iteration}: feature norm {norm:e} exceeds limit")]
    Divergence { iteration: usize, norm: f64 },

    #[error("world definition: {0}")]
    World(String),
}

impl Error {
    pub(crate) fn param(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            field,
            reason: reason.into(),
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Shape { expected, got })
    }
}
