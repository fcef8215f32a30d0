use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("scripted oracle has no reply for {template_id} / {fingerprint}")]
    OracleMiss {
        template_id: String,
        fingerprint: String,
    },

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("export error for record {provenance_id}: {message}")]
    Export {
        provenance_id: String,
        message: String,
    },

    #[error("numeric error for pair {provenance_id}: {message}")]
    Numeric {
        provenance_id: String,
        message: String,
    },

    #[error("inference error: {0}")]
    Inference(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("model error: {0}")]
    Model(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors that abort a pipeline run (as opposed to per-sample failures
    /// that are counted and skipped).
    pub fn is_transport(&self) -> bool {
        matches!(self, Error::Transport { .. })
    }
}
