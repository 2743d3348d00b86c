//! Command-line driver around `qcface-core`: regularizer calibration,
//! analytic-vs-numeric gradient verification, synthetic training runs,
//! artifact export, and one-dimensional config sweeps.

use std::fmt;
use std::path::PathBuf;

pub mod config;
pub mod io;
pub mod ops;

/// Failure classes, one per process exit code.
#[derive(Debug)]
pub enum CliError {
    /// A requested verification did not hold: exit 1.
    Check(String),
    /// Bad flags, unreadable or invalid configuration: exit 2.
    Usage(String),
    /// The run aborted on non-finite numerics: exit 3.
    Numeric {
        message: String,
        state_path: Option<PathBuf>,
    },
    /// A required artifact is absent: exit 4.
    Missing(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Check(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Numeric { .. } => 3,
            CliError::Missing(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Check(m) | CliError::Usage(m) | CliError::Missing(m) => write!(f, "{m}"),
            CliError::Numeric {
                message,
                state_path,
            } => {
                write!(f, "{message}")?;
                if let Some(p) = state_path {
                    write!(f, "\nstate dump: {}", p.display())?;
                }
                Ok(())
            }
        }
    }
}

impl From<qcface_core::Error> for CliError {
    fn from(e: qcface_core::Error) -> Self {
        match &e {
            qcface_core::Error::NonFiniteGradient { .. }
            | qcface_core::Error::NonFiniteLoss { .. } => CliError::Numeric {
                message: e.to_string(),
                state_path: None,
            },
            _ => CliError::Usage(e.to_string()),
        }
    }
}
