use std::process::ExitCode;

use maos_core::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{0}")]
    Io(String),
    /// Sweep children that failed, after all others ran.
    #[error("{failed} of {total} sweep runs failed")]
    Sweep { failed: usize, total: usize },
}

impl CliError {
    /// 0 success, 1 usage/config, 2 numeric abort, 3 I/O.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numeric(_) | CliError::Sweep { .. } => 2,
            CliError::Io(_) => 3,
        }
    }

    pub fn to_exit(&self) -> ExitCode {
        ExitCode::from(self.exit_code())
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::NonFinite { .. } | Error::Domain { .. } | Error::EmptyTensor { .. } | Error::DegenerateSpatial { .. } | Error::NonScalarLoss { .. } => CliError::Numeric(msg),
            Error::Io { .. } | Error::Truncated(_) | Error::Corrupt { .. } | Error::UnsupportedFormat(_) | Error::Version { .. } | Error::MissingKey(_) => CliError::Io(msg),
            Error::ShapeMismatch { .. } | Error::GroupDivisibility { .. } | Error::SpatialUnderflow { .. } | Error::Config(_) | Error::TooFew { .. } | Error::Json(_) => CliError::Usage(msg),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub(crate) fn io_err(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}
