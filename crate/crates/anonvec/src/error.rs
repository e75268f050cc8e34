use std::path::PathBuf;

use thiserror::Error;

/// CLI failures, split by whose fault they are: user and input errors exit
/// with 2, everything else with 1.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("checkpoint not found at {}; run `anonvec train-theta` first or set `checkpoint`", .0.display())]
    MissingCheckpoint(PathBuf),
    #[error("{context}: {source}")]
    Core {
        context: String,
        source: anonvec_core::Error,
    },
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use anonvec_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Input(_) | CliError::MissingCheckpoint(_) => 2,
            CliError::Internal(_) => 1,
            CliError::Core { source, .. } => match source {
                E::NonFiniteObjective { .. } => 1,
                _ => 2,
            },
        }
    }

    pub fn core(context: impl Into<String>) -> impl FnOnce(anonvec_core::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Core { context, source }
    }
}
