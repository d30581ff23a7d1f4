use thiserror::Error;

use rrl_core::domain::DomainError;
use rrl_core::macrorisk::MacroRiskError;
use rrl_core::onefactor::OneFactorError;
use rrl_core::simlab::SimError;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or malformed input files.
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {message}")]
    Input { path: String, message: String },
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    OneFactor(#[from] OneFactorError),
    #[error(transparent)]
    MacroRisk(#[from] MacroRiskError),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error("{0} warning(s) with --strict")]
    Strict(usize),
    #[error("replay mismatch: {0}")]
    Replay(String),
}

impl CliError {
    pub fn input(path: impl std::fmt::Display, message: impl Into<String>) -> Self {
        CliError::Input {
            path: path.to_string(),
            message: message.into(),
        }
    }

    pub fn io(context: impl std::fmt::Display, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.to_string(),
            source,
        }
    }

    /// 2 for usage and input problems, 3 for warnings under `--strict`,
    /// 4 for replay mismatches, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Input { .. } | CliError::Domain(_) => 2,
            CliError::Strict(_) => 3,
            CliError::Replay(_) => 4,
            _ => 1,
        }
    }
}
