use thiserror::Error;

use sdpn_core::Error as CoreError;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const DATA: i32 = 2;
    pub const NUMERICAL: i32 = 3;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: CoreError,
    },
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => exit::USAGE,
            CliError::GradCheck(_) => exit::NUMERICAL,
            CliError::File { source, .. } | CliError::Core(source) => core_code(source),
        }
    }
}

fn core_code(e: &CoreError) -> i32 {
    match e {
        CoreError::InvalidConfig(_)
        | CoreError::NonPositiveTemperature(_)
        | CoreError::KTooLarge { .. }
        | CoreError::Json(_) => exit::USAGE,
        CoreError::DivergedLoss { .. }
        | CoreError::ZeroVarianceColumn { .. }
        | CoreError::ZeroVector
        | CoreError::DegenerateCohort { .. } => exit::NUMERICAL,
        _ => exit::DATA,
    }
}

/// Attaches a path to errors raised while reading or writing it.
pub(crate) trait WithPath<T> {
    fn at(self, path: &std::path::Path) -> CliResult<T>;
}

impl<T> WithPath<T> for sdpn_core::Result<T> {
    fn at(self, path: &std::path::Path) -> CliResult<T> {
        self.map_err(|source| CliError::File {
            path: path.display().to_string(),
            source,
        })
    }
}
