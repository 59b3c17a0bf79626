use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("layer {layer}: {msg}")]
    LayerShape { layer: usize, msg: String },

    #[error("unknown activation `{0}`")]
    UnknownActivation(String),

    #[error("unsupported format version {0}")]
    FormatVersion(u32),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("control limits must satisfy lower < upper (coordinate {0})")]
    InvalidLimits(usize),

    #[error("invalid set: {0}")]
    InvalidSet(String),

    #[error("cannot bisect degenerate dimension {0}")]
    DegenerateDimension(usize),

    #[error("convex hull needs at least 3 non-collinear points")]
    DegenerateHull,

    #[error("linear program is infeasible")]
    Infeasible,

    #[error("linear program is unbounded")]
    Unbounded,

    #[error("simplex did not converge within {0} pivots")]
    PivotLimit(usize),

    #[error("bounds were computed for a domain that does not contain the requested set")]
    DomainMismatch,

    #[error("non-finite intermediate bounds at layer {0}")]
    NonFiniteBounds(usize),

    #[error("invalid specification: {0}")]
    Specification(String),

    #[error("label {label} out of range for {outputs} outputs")]
    InvalidLabel { label: usize, outputs: usize },

    #[error("nominal input has tied top scores; label is ambiguous")]
    AmbiguousLabel,

    #[error("partition of {0} cells exceeds the limit of 1e6")]
    TooManyCells(u128),

    #[error("corner search over {0} perturbed dimensions is too large; enable the heuristic search")]
    CornerSearchTooLarge(usize),

    #[error("sample bounding box at step {0} has zero area")]
    DegenerateMetric(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}
