use thiserror::Error;

/// Errors raised anywhere in the model, training, and data pipeline.
#[derive(Debug, Error)]
pub enum IgnError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("matrix not positive definite (last jitter tried: {jitter:e})")]
    NotPositiveDefinite { jitter: f64 },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("numerical failure in {term}")]
    Numerical { term: String },

    #[error("Newton iteration did not converge after {iterations} steps")]
    NewtonNonConvergence { iterations: usize },

    #[error("training diverged at epoch {epoch}: {reason}{}", checkpoint_note(.checkpoint))]
    Diverged {
        epoch: usize,
        reason: String,
        checkpoint: Option<std::path::PathBuf>,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("class {class} failed to train: {source}")]
    ClassHead {
        class: usize,
        #[source]
        source: Box<IgnError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn checkpoint_note(p: &Option<std::path::PathBuf>) -> String {
    match p {
        Some(p) => format!(" (last good checkpoint: {})", p.display()),
        None => String::new(),
    }
}

impl IgnError {
    pub fn numerical(term: impl Into<String>) -> Self {
        IgnError::Numerical { term: term.into() }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        IgnError::Contract(msg.into())
    }

    /// True for failures the trainer may recover from by skipping a batch.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            IgnError::NotPositiveDefinite { .. }
                | IgnError::Numerical { .. }
                | IgnError::NewtonNonConvergence { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, IgnError>;
