use std::path::PathBuf;

use thiserror::Error;

/// A single violated configuration invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub reason: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.reason)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {}", join(.0))]
    Invalid(Vec<Violation>),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl ConfigError {
    pub fn violations(&self) -> &[Violation] {
        match self {
            ConfigError::Invalid(v) => v,
            _ => &[],
        }
    }
}

fn join(v: &[Violation]) -> String {
    v.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: expected {expected} experts per token, found {found}")]
    TopKMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("trace io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Structural failures of a simulation run. Both variants indicate a bug in
/// the engine or in the schedule it was fed, never a recoverable condition.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("deadlock at t={time:.9}s: {state}")]
    DeadlockDetected { time: f64, state: String },
    #[error("buffer overflow on chiplet {chiplet}: {occupied} > {capacity} bytes")]
    BufferOverflow {
        chiplet: usize,
        occupied: u64,
        capacity: u64,
    },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
