use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("diverged at iteration {iteration} (feature norm {norm:.3e}) in {run}")]
    Divergence { run: String, iteration: usize, norm: f64 },
    #[error("io error: {0}")]
    Io(String),
    #[error("{0}")]
    Run(String),
}

impl CliError {
    pub fn config(field: &str, reason: impl std::fmt::Display) -> Self {
        CliError::Config(format!("{field}: {reason}"))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence { .. } => 3,
            CliError::Io(_) | CliError::Run(_) => 1,
        }
    }

    /// Maps a library error raised while running `run`.
    pub fn from_lib(run: &str, e: perpneg::Error) -> Self {
        match e {
            perpneg::Error::Divergence { iteration, norm } => CliError::Divergence {
                run: run.to_string(),
                iteration,
                norm,
            },
            perpneg::Error::Parameter { field, reason } => CliError::config(field, reason),
            perpneg::Error::Lookup { kind, name } => CliError::config(kind, format!("unknown {kind} \"{name}\"")),
            other => CliError::Run(format!("{run}: {other}")),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
