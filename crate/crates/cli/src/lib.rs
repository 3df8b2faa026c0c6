//! Scenario-driven front end: invariant sets for LTI systems, gain
//! synthesis, tight formations and closed-loop validation runs, with JSON,
//! CSV and SVG artifacts.

pub mod commands;
pub mod config;
pub mod report;
pub mod svg;

use std::path::{Path, PathBuf};

use formset_core::closedloop::ClosedLoopError;
use formset_core::gainsynth::SynthesisError;
use formset_core::invariants::InvariantError;
use formset_core::simkit::SimError;
use formset_core::tightform::FormationError;
use serde::Serialize;
use thiserror::Error;

pub use commands::{cmd_demo, cmd_formation, cmd_gains, cmd_simulate, cmd_ub};
pub use config::ScenarioConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Infeasible(_) => 3,
            Self::Numerical(_) | Self::Io { .. } => 4,
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_owned(),
            source,
        }
    }
}

impl From<InvariantError> for CliError {
    fn from(e: InvariantError) -> Self {
        match e {
            InvariantError::NotHurwitz(_) => Self::Infeasible(e.to_string()),
            InvariantError::Dimension(_) | InvariantError::InvalidBox | InvariantError::StepTooLarge { .. } => {
                Self::Config(e.to_string())
            }
            _ => Self::Numerical(e.to_string()),
        }
    }
}

impl From<ClosedLoopError> for CliError {
    fn from(e: ClosedLoopError) -> Self {
        match e {
            ClosedLoopError::Discriminant { .. } | ClosedLoopError::NotPositiveDefinite(_) => {
                Self::Infeasible(e.to_string())
            }
            ClosedLoopError::InvalidGains { .. }
            | ClosedLoopError::Dimension(_)
            | ClosedLoopError::InvalidNoise
            | ClosedLoopError::Graph(_) => Self::Config(e.to_string()),
            ClosedLoopError::Invariant(inner) => inner.into(),
            ClosedLoopError::Linalg(_) => Self::Numerical(e.to_string()),
        }
    }
}

impl From<SynthesisError> for CliError {
    fn from(e: SynthesisError) -> Self {
        match e {
            SynthesisError::InfeasibleCorridor => Self::Infeasible(e.to_string()),
            SynthesisError::InvalidSpec(_) => Self::Config(e.to_string()),
            SynthesisError::ClosedLoop(inner) => inner.into(),
        }
    }
}

impl From<FormationError> for CliError {
    fn from(e: FormationError) -> Self {
        match e {
            FormationError::Infeasible(_) => Self::Infeasible(e.to_string()),
            FormationError::Invalid(_) => Self::Config(e.to_string()),
            FormationError::BudgetExhausted(_) | FormationError::Qp(_) => Self::Numerical(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Dimension(_) | SimError::Options(_) | SimError::StepTooLarge { .. } | SimError::Graph(_) => {
                Self::Config(e.to_string())
            }
            SimError::InconsistentTarget(_) => Self::Infeasible(e.to_string()),
            SimError::Diverged { .. } | SimError::Linalg(_) => Self::Numerical(e.to_string()),
        }
    }
}

/// Flags shared by every command.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out: PathBuf,
    /// Suppresses timestamps in artifacts.
    pub deterministic: bool,
    /// Overrides the config's base seed.
    pub seed: Option<u64>,
}

impl RunOptions {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            out: out.into(),
            deterministic: false,
            seed: None,
        }
    }

    fn prepare(&self) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::io(&self.out, e))
    }

    fn stamp(&self) -> Option<u64> {
        if self.deterministic {
            return None;
        }
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .ok()
            .map(|d| d.as_secs())
    }

    fn write(&self, name: &str, contents: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.out.join(name);
        std::fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Numerical(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }
}
