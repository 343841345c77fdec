use std::io;

use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are coarse on purpose: callers mostly need to distinguish bad
/// input (caller's fault, reject), numerical breakdown (delete the offending
/// track and keep going), and I/O / format problems (report with location).
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid argument or inconsistent input data.
    #[error("{context}: {message}")]
    Input {
        context: &'static str,
        message: String,
    },

    /// A numerical operation produced a singular or non-finite result.
    #[error("numerical failure in {0}")]
    Numerical(String),

    /// Malformed line in a text file.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// Bad header or inconsistent layout in a structured file.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn input(context: &'static str, message: impl Into<String>) -> Self {
        Error::Input {
            context,
            message: message.into(),
        }
    }

    pub fn numerical(context: impl Into<String>) -> Self {
        Error::Numerical(context.into())
    }

    pub fn parse(path: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    pub fn format(message: impl Into<String>) -> Self {
        Error::Format(message.into())
    }
}
