use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] talos::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    /// A fanned-out child process failed; carries its exit code.
    #[error("{0}")]
    Child(String, i32),
}

impl CliError {
    /// 2 for configuration problems, 3 for numeric failures, 4 for IO and
    /// file-format problems.
    pub fn exit_code(&self) -> i32 {
        use talos::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                E::Config(_) | E::Layout(_) | E::Shape(_) | E::Empty(_) => 2,
                E::Numeric(_) => 3,
                E::Io(_) | E::Format(_) => 4,
            },
            CliError::Io(_) | CliError::Json(_) => 4,
            CliError::Child(_, code) => *code,
        }
    }
}
