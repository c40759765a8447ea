use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested tape operation.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// An operation produced a NaN or infinity.
    #[error("non-finite value produced by {op}{}", detail.as_deref().map(|d| format!(" ({d})")).unwrap_or_default())]
    NonFinite {
        op: &'static str,
        detail: Option<String>,
    },

    /// A function precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A run configuration is internally inconsistent or out of range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// The calibration set is too small for a finite conformal quantile
    /// at the requested miscoverage rate.
    #[error(
        "insufficient calibration data: need at least {needed} scores for \
         epsilon = {epsilon}, have {have}"
    )]
    InsufficientCalibration {
        needed: usize,
        have: usize,
        epsilon: f64,
    },

    /// Training was aborted because a loss evaluated to NaN or infinity.
    #[error("non-finite loss in {method} at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        method: String,
        epoch: usize,
        batch: usize,
        detail: String,
    },

    /// Every grid point failed; per-point diagnostics are listed.
    #[error("grid search failed: all {count} points diverged or errored:\n{}", diagnostics.join("\n"))]
    GridExhausted {
        count: usize,
        diagnostics: Vec<String>,
    },

    /// A dataset column contained no parseable numbers.
    #[error("non-numeric column(s) in csv: {}", .0.join(", "))]
    NonNumericColumns(Vec<String>),

    /// The named column is missing from the csv header.
    #[error("column {0:?} not found in csv header")]
    MissingColumn(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
