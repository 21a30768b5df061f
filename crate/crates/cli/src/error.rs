use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or config; nothing was run.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("cannot write output: {0}")]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Run(#[from] mvsde::Error),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    /// Core validation failures raised while building from a config.
    pub fn from_core_config(e: mvsde::Error) -> Self {
        match e {
            mvsde::Error::InvalidInput(msg) => CliError::Config(msg),
            other => CliError::Run(other),
        }
    }
}
