use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("loss node must be scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("node {id} is not on this tape (len {len})")]
    DanglingNode { id: usize, len: usize },

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("simulation overflow at step {step}: |Z| = {value:e}; try a smaller lag depth or a different seed")]
    Overflow { step: usize, value: f64 },

    #[error("training diverged at epoch {epoch}; last finite epoch: {last_finite:?}")]
    Divergence {
        epoch: usize,
        last_finite: Option<usize>,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("segment `{segment}` has {len} rows but windows need at least {required}")]
    SegmentTooShort {
        segment: String,
        len: usize,
        required: usize,
    },

    #[error("channel manifest mismatch: model fitted on [{fitted}], windows carry [{given}]")]
    ManifestMismatch { fitted: String, given: String },

    #[error("singular normal equations at lambda = 0; use ridge_lambda > 0")]
    SingularSystem,

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("missing counterpart row for {0}")]
    MissingCounterpart(String),

    #[error("column {0} not found")]
    MissingColumn(String),

    #[error("non-numeric or missing value at row {row}, column {column}: {value:?}")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("file {0} contains no data rows")]
    EmptyFile(PathBuf),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user input rather than by a run going wrong.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::InvalidConfig { .. }
            | Error::MissingColumn(_)
            | Error::NonNumeric { .. }
            | Error::EmptyFile(_)
            | Error::SegmentTooShort { .. }
            | Error::Json(_) => true,
            Error::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }

    /// Process exit code for the CLI: 1 for validation errors, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.is_validation() {
            1
        } else {
            2
        }
    }
}
