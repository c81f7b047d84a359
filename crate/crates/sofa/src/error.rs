use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

/// One problem found while validating configuration, addressed by a
/// JSON-pointer-style path (`/policy/default_fraction`).
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct ConfigIssue {
    pub pointer: String,
    pub message: String,
}

impl ConfigIssue {
    pub fn new(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            pointer: pointer.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.pointer, self.message)
    }
}

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration:{}", render_issues(.0))]
    Config(Vec<ConfigIssue>),

    #[error("{message}: {}", .ids.join(", "))]
    Validation { message: String, ids: Vec<String> },

    #[error("format error: {0}")]
    Format(String),

    #[error("empty population: {0}")]
    EmptyPopulation(String),

    #[error("donor {donor} has no eligible recipients")]
    EmptyRow { donor: String },

    #[error("predicate {predicate} selects no eligible recipients for donor {donor}")]
    EmptyTarget { predicate: String, donor: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("dense solve refused for {n} agents (limit {limit}); use the iterative fixed point instead")]
    TooLarge { n: usize, limit: usize },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("insufficient history: {have} round(s) observed, {need} required")]
    InsufficientHistory { have: usize, need: usize },

    #[error("fixed point not reached after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config(vec![ConfigIssue::new(pointer, message)])
    }

    pub fn validation(message: impl Into<String>, ids: Vec<String>) -> Self {
        Error::Validation {
            message: message.into(),
            ids,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

fn render_issues(issues: &[ConfigIssue]) -> String {
    issues.iter().map(|i| format!("\n  {i}")).collect()
}

pub type Result<T> = std::result::Result<T, Error>;
