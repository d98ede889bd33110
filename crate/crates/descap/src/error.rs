use std::fmt;
use std::io;
use std::path::Path;

/// What went wrong, as far as the exit code is concerned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numerical => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Config => "config",
            ErrorKind::Data => "data",
            ErrorKind::Numerical => "numerical",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Error {
    pub kind: ErrorKind,
    pub message: String,
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Config,
            message: msg.into(),
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Data,
            message: msg.into(),
        }
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Numerical,
            message: msg.into(),
        }
    }

    pub fn io(path: &Path, err: io::Error) -> Self {
        Self::data(format!("{}: {err}", path.display()))
    }

    /// Prefix the message with where it happened.
    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }

    /// One line for stderr: `error kind=<kind> code=<n> msg=<json string>`.
    pub fn diagnostic(&self) -> String {
        format!(
            "error kind={} code={} msg={}",
            self.kind.as_str(),
            self.exit_code(),
            serde_json::Value::String(self.message.clone())
        )
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error: {}", self.kind.as_str(), self.message)
    }
}

impl std::error::Error for Error {}

impl From<descap_core::Error> for Error {
    fn from(e: descap_core::Error) -> Self {
        let kind = match e {
            descap_core::Error::Config(_) => ErrorKind::Config,
            descap_core::Error::Numerical(_) => ErrorKind::Numerical,
            descap_core::Error::Data(_) | descap_core::Error::Invalid(_) | descap_core::Error::Shape { .. } => {
                ErrorKind::Data
            }
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
