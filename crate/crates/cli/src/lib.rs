//! Experiment runner behind the `perpneg` binary.

pub mod config;
pub mod error;
pub mod output;
pub mod run;

use std::path::{Path, PathBuf};

pub use config::{ExperimentConfig, ExperimentKind, Loaded};
pub use error::CliError;
pub use run::{run_experiment, Summary};

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

/// Loads `config`, checks it is a `kind` experiment, applies overrides
/// and runs it.
pub fn execute(kind: ExperimentKind, config: &Path, overrides: &Overrides) -> Result<Summary, CliError> {
    let mut loaded = ExperimentConfig::load(config)?;
    if loaded.config.kind != kind {
        return Err(CliError::config(
            "kind",
            format!("config is a {} experiment, not {kind}", loaded.config.kind),
        ));
    }
    if let Some(seed) = overrides.seed {
        loaded.config.sampling.seeds.start = seed;
        if let Some(d) = loaded.config.distill.as_mut() {
            d.seeds.start = seed;
        }
    }
    let out = output_dir(&loaded, overrides);
    match overrides.threads {
        Some(0) => Err(CliError::config("threads", "must be at least 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Run(e.to_string()))?
            .install(|| run_experiment(&loaded, &out)),
        None => run_experiment(&loaded, &out),
    }
}

/// `--out`, then the config's `out`, then `out/<kind>`.
pub fn output_dir(loaded: &Loaded, overrides: &Overrides) -> PathBuf {
    overrides
        .out
        .clone()
        .or_else(|| loaded.config.out.clone())
        .unwrap_or_else(|| Path::new("out").join(loaded.config.kind.to_string()))
}

/// Contents of a finished run's `summary.txt`, checked against `config`
/// when given.
pub fn report(dir: &Path, config: Option<&Path>) -> Result<String, CliError> {
    let path = dir.join("summary.txt");
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    if let Some(cfg) = config {
        let loaded = ExperimentConfig::load(cfg)?;
        let expected = format!("config_hash = {}", loaded.hash());
        if text.lines().next() != Some(expected.as_str()) {
            return Err(CliError::config(
                "config",
                format!("{} was produced by a different config", path.display()),
            ));
        }
    }
    Ok(text)
}
