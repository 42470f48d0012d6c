//! Library half of the `dia` binary: configuration, subcommands and the
//! exit-code contract.

pub mod commands;
pub mod config;

use std::fmt;

pub use config::{keys_help, schema, Key, RunConfig};

/// A failed run, classified by exit code.
#[derive(Debug, Clone, PartialEq)]
pub enum Failure {
    /// Bad configuration or arguments (exit 2).
    Config(String),
    /// Unreadable or unwritable file, malformed input data (exit 3).
    Io(String),
    /// Internal invariant violated, including a failed gradient check (exit 4).
    Invariant(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Io(_) => 3,
            Failure::Invariant(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Io(m) | Failure::Invariant(m) => m,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let class = match self {
            Failure::Config(_) => "config error",
            Failure::Io(_) => "io error",
            Failure::Invariant(_) => "invariant violation",
        };
        write!(f, "{class}: {}", self.message())
    }
}

impl From<dia_core::Error> for Failure {
    fn from(e: dia_core::Error) -> Self {
        use dia_core::Error as E;
        match e {
            E::Config(m) => Failure::Config(m),
            E::Io(_) | E::Format { .. } | E::Data(_) => Failure::Io(e.to_string()),
            E::Shape { .. } | E::NonFinite { .. } | E::NonFiniteAt { .. } | E::Graph(_) => {
                Failure::Invariant(e.to_string())
            }
        }
    }
}
