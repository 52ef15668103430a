use thiserror::Error;

use crate::gateway::GatewayError;
use crate::prompts::PromptError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Top-level error for pipeline operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("no candidates")]
    NoCandidates,

    #[error("candidate {0} has not been graded")]
    Ungraded(String),

    #[error(transparent)]
    Gateway(#[from] GatewayError),

    #[error(transparent)]
    Prompt(#[from] PromptError),

    #[error("could not parse grader output: {0}")]
    GradeParse(String),

    #[error("conjecture extraction failed: {0}")]
    Extraction(String),

    #[error("resume failed: {0}")]
    Resume(String),

    #[error("config: {0}")]
    Config(String),

    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True when the underlying cause is an exhausted token budget.
    pub fn is_budget_exhausted(&self) -> bool {
        matches!(self, Error::Gateway(GatewayError::BudgetExceeded { .. }))
    }
}
