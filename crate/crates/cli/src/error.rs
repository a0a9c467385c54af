//! Stage errors, rendered as machine-readable JSON on stderr.

use serde::Serialize;

#[derive(Clone, Debug, Serialize)]
pub struct StageError {
    pub stage: String,
    pub message: String,
    /// Run-relative path of the offending artifact, when one exists.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub artifact: Option<String>,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.artifact {
            Some(artifact) => write!(f, "[{}] {} ({artifact})", self.stage, self.message),
            None => write!(f, "[{}] {}", self.stage, self.message),
        }
    }
}

impl std::error::Error for StageError {}

impl StageError {
    pub fn new(stage: &str, message: impl Into<String>) -> StageError {
        StageError {
            stage: stage.to_string(),
            message: message.into(),
            artifact: None,
        }
    }

    pub fn with_artifact(stage: &str, message: impl Into<String>, artifact: impl Into<String>) -> StageError {
        StageError {
            stage: stage.to_string(),
            message: message.into(),
            artifact: Some(artifact.into()),
        }
    }

    /// The JSON document printed to standard error on failure.
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

/// Maps any core error into a stage error with context.
pub fn stage_err<E: std::fmt::Display>(stage: &str) -> impl Fn(E) -> StageError + '_ {
    move |e| StageError::new(stage, e.to_string())
}
