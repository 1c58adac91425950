use thiserror::Error;

/// Command failure, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Invariant(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<pillardet::Error> for CliError {
    fn from(e: pillardet::Error) -> Self {
        use pillardet::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) => CliError::Config(msg),
            E::Internal(_) => CliError::Invariant(msg),
            E::Domain(_)
            | E::Format { .. }
            | E::Parse { .. }
            | E::Shape { .. }
            | E::MissingTensor(_)
            | E::UnknownTensor(_)
            | E::Io { .. } => CliError::Data(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
