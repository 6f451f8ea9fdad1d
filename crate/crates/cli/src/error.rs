use std::fmt;
use std::path::Path;

use xmalign_core::{Error, FileError};

/// Command failure, carrying the process exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration: exit 2.
    Usage(String),
    /// Unreadable, unwritable, corrupt or truncated files: exit 3.
    Io(String),
    /// Non-finite values or a failed gradient check: exit 4.
    Numeric(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn io(path: &Path, err: impl fmt::Display) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }

    /// Tags a file-level failure with the offending path.
    pub fn file(path: &Path, err: FileError) -> Self {
        match err {
            FileError::Content(e) => CliError::from(e).context(&path.display().to_string()),
            FileError::Io(e) => CliError::io(path, e),
            other => CliError::io(path, other),
        }
    }

    pub fn context(self, prefix: &str) -> Self {
        match self {
            CliError::Usage(m) => CliError::Usage(format!("{prefix}: {m}")),
            CliError::Io(m) => CliError::Io(format!("{prefix}: {m}")),
            CliError::Numeric(m) => CliError::Numeric(format!("{prefix}: {m}")),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Numeric(m) => CliError::Numeric(m),
            Error::Shape(m) => CliError::Usage(format!("shape mismatch: {m}")),
            Error::Validation(m) => CliError::Usage(m),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "error: {m}"),
            CliError::Io(m) => write!(f, "I/O error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}
