//! Harness error type with stable process exit codes.

use std::fmt;
use std::io;

/// Errors surfaced by the harness. Exit codes are a contract: 0 success,
/// 2 configuration, 3 numeric failure, 4 no lambda-valid solution.
#[derive(Debug)]
pub enum HarnessError {
    Config(String),
    Numeric(String),
    NoValidLambda,
    Io(io::Error),
    Internal(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Numeric(_) => 3,
            HarnessError::NoValidLambda => 4,
            HarnessError::Io(_) | HarnessError::Internal(_) => 1,
        }
    }
}

impl fmt::Display for HarnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HarnessError::Config(d) => write!(f, "configuration error: {}", d),
            HarnessError::Numeric(d) => write!(f, "numeric failure: {}", d),
            HarnessError::NoValidLambda => write!(f, "no lambda-valid solution in the sweep"),
            HarnessError::Io(e) => write!(f, "io error: {}", e),
            HarnessError::Internal(d) => write!(f, "internal error: {}", d),
        }
    }
}

impl std::error::Error for HarnessError {}

impl From<io::Error> for HarnessError {
    fn from(e: io::Error) -> Self {
        HarnessError::Io(e)
    }
}

impl From<dselect_core::GraphError> for HarnessError {
    fn from(e: dselect_core::GraphError) -> Self {
        HarnessError::Internal(e.to_string())
    }
}

impl From<dselect_core::gate::GateError> for HarnessError {
    fn from(e: dselect_core::gate::GateError) -> Self {
        HarnessError::Internal(e.to_string())
    }
}

impl From<dselect_core::synth::SynthError> for HarnessError {
    fn from(e: dselect_core::synth::SynthError) -> Self {
        HarnessError::Config(e.to_string())
    }
}
