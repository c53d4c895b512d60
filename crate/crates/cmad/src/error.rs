use std::path::PathBuf;

/// Front-end failures, grouped by the exit code they produce.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("training failed: {0}")]
    Divergence(String),

    #[error("cannot access {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("checkpoint {} does not exist", .0.display())]
    MissingCheckpoint(PathBuf),

    #[error("malformed file {}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Engine(#[from] cmad_core::Error),
}

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_IO: i32 = 4;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use cmad_core::Error as E;
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Divergence(_) => EXIT_DIVERGENCE,
            CliError::Io { .. } | CliError::MissingCheckpoint(_) | CliError::Format { .. } => EXIT_IO,
            CliError::Engine(e) => match e {
                E::Diverged { .. } | E::Training { .. } | E::Numeric(_) => EXIT_DIVERGENCE,
                E::Parse(_) => EXIT_IO,
                E::Domain(_) | E::Shape(_) | E::Config(_) | E::Usage(_) => EXIT_CONFIG,
            },
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
