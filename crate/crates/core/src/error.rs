use thiserror::Error;

/// Errors raised by the laboratory.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid group: {0}")]
    InvalidGroup(String),
    #[error("degenerate advantage denominator: delta = 0 and group std = 0")]
    DegenerateDenominator,
    #[error("invalid baseline {0}: must lie in [-1, 1]")]
    InvalidBaseline(f64),
    #[error("invalid probability ratio {0}: must be positive")]
    InvalidRatio(f64),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("support mismatch: q({index}) = 0 while p({index}) > 0")]
    SupportMismatch { index: usize },
    #[error("invalid token {token} at position {position} (vocabulary size {vocab})")]
    InvalidToken {
        token: usize,
        position: usize,
        vocab: usize,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("size budget exceeded: V^T = {vocab}^{len} > 65536")]
    Size { vocab: usize, len: usize },
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("invalid pass@k query: {0}")]
    InvalidQuery(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("undefined metric {0}: zero denominator")]
    UndefinedMetric(&'static str),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(
        "probe violation at position {position}: magnitude {magnitude} != 1 - pi ({expected})"
    )]
    ProbeViolation {
        position: usize,
        magnitude: f64,
        expected: f64,
    },
    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<LabError>,
    },
    #[error("grid point (delta = {delta}, beta = {beta}): {source}")]
    AtGridPoint {
        delta: f64,
        beta: f64,
        #[source]
        source: Box<LabError>,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("path not found: {0}")]
    NotFound(String),
}

impl LabError {
    pub(crate) fn at_step(self, step: usize) -> Self {
        LabError::AtStep {
            step,
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
