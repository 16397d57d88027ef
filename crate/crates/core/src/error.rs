use thiserror::Error;

/// Errors produced anywhere in the auditing pipeline.
#[derive(Debug, Error)]
pub enum UmidError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("shape mismatch: expected {expected}, got {actual} ({context})")]
    Shape {
        expected: usize,
        actual: usize,
        context: &'static str,
    },
    #[error("training error: {0}")]
    Training(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("inversion failed for {text:?} in run {run}: {reason}")]
    Inversion {
        text: String,
        run: usize,
        reason: String,
    },
    #[error("gibberish generation error: {0}")]
    Generation(String),
    #[error("detector fit error: {0}")]
    Fit(String),
    #[error("detector state error: {0}")]
    State(String),
    #[error("degenerate clustering: {0}")]
    Degenerate(String),
    #[error("theory verification refused: gap_s={gap_s:.6}, gap_d={gap_d:.6}")]
    NoSeparation { gap_s: f64, gap_d: f64 },
    #[error("bridge error: {0}")]
    Bridge(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, UmidError>;
