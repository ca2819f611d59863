use thiserror::Error;

/// Process exit statuses.
pub mod exit {
    pub const OK: u8 = 0;
    /// Unexpected failure (I/O on the output directory, failed self-check).
    pub const FAILURE: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const DATA: u8 = 3;
    pub const DIVERGENCE: u8 = 4;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("unknown config key '{0}'")]
    UnknownKey(String),

    #[error("invalid value '{value}' for config key '{key}'")]
    Value { key: String, value: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(ibanet::Error),

    #[error("{0}")]
    Run(ibanet::Error),

    #[error("cannot write {path}: {source}")]
    Output { path: String, source: std::io::Error },

    #[error("{0}")]
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::UnknownKey(_) | CliError::Value { .. } | CliError::Config(_) => exit::CONFIG,
            CliError::Data(_) => exit::DATA,
            CliError::Run(ibanet::Error::Divergence { .. }) => exit::DIVERGENCE,
            CliError::Run(_) | CliError::Output { .. } | CliError::Check(_) => exit::FAILURE,
        }
    }
}

impl From<ibanet::Error> for CliError {
    fn from(e: ibanet::Error) -> Self {
        CliError::Run(e)
    }
}
