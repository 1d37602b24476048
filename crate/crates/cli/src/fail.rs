use std::fmt;

use mil_lstm::Error;

pub const INPUT: u8 = 2;
pub const GENERATION: u8 = 3;
pub const COMPATIBILITY: u8 = 4;
pub const NUMERIC: u8 = 5;

/// An error message and the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn input(message: impl Into<String>) -> Self {
        Self::new(INPUT, message)
    }

    pub fn compatibility(message: impl Into<String>) -> Self {
        Self::new(COMPATIBILITY, message)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Generation(_) => GENERATION,
            Error::Compatibility(_) | Error::Version { .. } => COMPATIBILITY,
            Error::NonFinite { .. } | Error::NonFiniteLoss { .. } => NUMERIC,
            _ => INPUT,
        };
        Self::new(code, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::input(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::input(e.to_string())
    }
}

pub type CliResult<T> = Result<T, Failure>;
