//! One error type for the whole tool, split by how the process should exit:
//! validation failures (bad config, missing file, malformed input) exit 1,
//! runtime failures (IO mid-run, divergence, corrupt artifact) exit 2.

use std::fmt;

#[derive(Debug)]
pub enum ToolError {
    Validation(String),
    Runtime(String),
}

impl ToolError {
    pub fn validation(msg: impl Into<String>) -> Self {
        ToolError::Validation(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        ToolError::Runtime(msg.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            ToolError::Validation(_) => 1,
            ToolError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for ToolError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ToolError::Validation(m) => write!(f, "validation error: {m}"),
            ToolError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl std::error::Error for ToolError {}

impl From<std::io::Error> for ToolError {
    fn from(e: std::io::Error) -> Self {
        ToolError::Runtime(format!("io: {e}"))
    }
}

impl From<ddistill_core::TensorError> for ToolError {
    fn from(e: ddistill_core::TensorError) -> Self {
        ToolError::Runtime(format!("tensor: {e}"))
    }
}

impl From<ddistill_core::augment::AugmentError> for ToolError {
    fn from(e: ddistill_core::augment::AugmentError) -> Self {
        ToolError::Validation(format!("augment: {e}"))
    }
}

impl From<serde_json::Error> for ToolError {
    fn from(e: serde_json::Error) -> Self {
        ToolError::Runtime(format!("json: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, ToolError>;
