use dmad_core::Error as CoreError;

/// Failure of a CLI command, mapped onto the process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing dependency: {0}")]
    Dependency(String),
    #[error("training anomaly: {0}")]
    Anomaly(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 0 success, 1 usage or config, 2 runtime training anomaly, 3 I/O.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Dependency(_) => 1,
            CliError::Anomaly(_) => 2,
            CliError::Io(_) => 3,
            CliError::Core(e) => match e {
                CoreError::Anomaly(_) => 2,
                CoreError::Io(_) | CoreError::Csv(_) | CoreError::Parse { .. } | CoreError::Checkpoint(_) => 3,
                _ => 1,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
