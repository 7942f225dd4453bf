use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] dud_core::Error),
    #[error("config {}: {source}", path.display())]
    ConfigParse { path: PathBuf, source: serde_json::Error },
    #[error("bad --set `{0}`: {1}")]
    Override(String, String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
}

impl CliError {
    /// 2 for configuration problems, 3 for numeric failures, 4 for I/O.
    pub fn exit_code(&self) -> i32 {
        use dud_core::Error as E;
        match self {
            CliError::ConfigParse { .. } | CliError::Override(..) | CliError::Config(_) => 2,
            CliError::Io { .. } => 4,
            CliError::Core(e) => match e {
                E::InvalidSpec { .. }
                | E::ShapeMismatch(_)
                | E::ImageTooSmall { .. }
                | E::SpecMismatch(_)
                | E::Json(_) => 2,
                E::NonFinite { .. } | E::NonFiniteLoss { .. } => 3,
                E::Corrupt { .. } | E::Format(_) | E::Io { .. } | E::Csv(_) | E::Plot(_) => 4,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
