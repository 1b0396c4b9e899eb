//! Error type shared across the core modules.

use alloc::string::String;
use core::fmt;

/// Errors produced by core operations.
///
/// `Contract` marks a caller-side violation of a documented precondition,
/// `Config` an invalid configuration value, `Numeric` a non-finite value in
/// a place the pipeline requires finiteness, and `MalformedInput` broken
/// input data (for example cyclic parent links in a message tree).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoreError {
    Contract(String),
    Config(String),
    Numeric(String),
    MalformedInput(String),
    Format(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Contract(msg) => write!(f, "contract violation: {msg}"),
            CoreError::Config(msg) => write!(f, "configuration error: {msg}"),
            CoreError::Numeric(msg) => write!(f, "numeric error: {msg}"),
            CoreError::MalformedInput(msg) => write!(f, "malformed input: {msg}"),
            CoreError::Format(msg) => write!(f, "format error: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;

/// Shorthand constructors; keeps call sites terse.
impl CoreError {
    pub fn contract(msg: impl Into<String>) -> Self {
        CoreError::Contract(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        CoreError::Numeric(msg.into())
    }
    pub fn malformed(msg: impl Into<String>) -> Self {
        CoreError::MalformedInput(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        CoreError::Format(msg.into())
    }
}
