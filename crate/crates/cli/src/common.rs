use std::path::{Path, PathBuf};

use clap::Args;
use larmoe_core::trainer::TrainConfig;
use larmoe_core::Error;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_STATE: u8 = 4;
const EXIT_INTERNAL: u8 = 1;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self {
            code: EXIT_IO,
            message: format!("{}: {e}", path.display()),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidArgument(_) | Error::UnknownTask(_) => EXIT_USAGE,
            Error::Io { .. } | Error::Format { .. } | Error::Version { .. } => EXIT_IO,
            Error::StageMismatch { .. } | Error::Empty(_) => EXIT_STATE,
            _ => EXIT_INTERNAL,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

/// JSON config file plus `--set key=value` overrides.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Training configuration (JSON). Missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config field, e.g. `--set lambda_dc=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    /// The file (or `fallback` when none is given) with overrides applied in order.
    pub fn resolve(&self, fallback: TrainConfig) -> Result<TrainConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::load(path)?,
            None => fallback,
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError {
            code: EXIT_IO,
            message: format!("{}: no such file", path.display()),
        })
    }
}
