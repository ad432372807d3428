use std::process::ExitCode;

/// Failure categories, each with its own exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("unsupported file version: {0}")]
    Version(String),
    #[error("missing prerequisite: {0}")]
    MissingStage(String),
    #[error("computation failed: {0}")]
    Compute(String),
}

impl CliError {
    /// 2 is left to argument parsing.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 3,
            CliError::Io(_) => 4,
            CliError::Format(_) => 5,
            CliError::Version(_) => 6,
            CliError::MissingStage(_) => 7,
            CliError::Compute(_) => 8,
        }
    }

    /// Attaches the file being processed to a library error.
    pub fn at(path: &std::path::Path) -> impl Fn(w8a8::Error) -> CliError + '_ {
        move |e| {
            let msg = format!("{}: {e}", path.display());
            match e {
                w8a8::Error::Format { .. } | w8a8::Error::Data(_) => CliError::Format(msg),
                w8a8::Error::Version { .. } => CliError::Version(msg),
                w8a8::Error::Io(_) => CliError::Io(msg),
                _ => CliError::from(e),
            }
        }
    }
}

impl From<w8a8::Error> for CliError {
    fn from(e: w8a8::Error) -> Self {
        let msg = e.to_string();
        match e {
            w8a8::Error::Config(_) => CliError::Config(msg),
            w8a8::Error::Io(_) => CliError::Io(msg),
            w8a8::Error::Format { .. } => CliError::Format(msg),
            w8a8::Error::Version { .. } => CliError::Version(msg),
            _ => CliError::Compute(msg),
        }
    }
}

impl From<CliError> for ExitCode {
    fn from(e: CliError) -> Self {
        ExitCode::from(e.exit_code())
    }
}
