//! CLI failures and their exit codes.

use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric: {0}")]
    Numeric(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            Self::Usage(_) | Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::Numeric(_) => 4,
        })
    }
}

impl From<coremac::Error> for CliError {
    fn from(e: coremac::Error) -> Self {
        use coremac::Error as E;
        let msg = e.to_string();
        match e {
            E::Parse(_) | E::Consistency(_) | E::Size { .. } | E::Io(_) => Self::Data(msg),
            E::Training { .. } | E::Calibration(_) | E::Domain(_) | E::Compile(_) => {
                Self::Numeric(msg)
            }
            E::Parameter(_) | E::Shape(_) | E::Format(_) | E::Json(_) => Self::Config(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Config(e.to_string())
    }
}
