use thiserror::Error;

#[derive(Debug, Error)]
pub enum UgnnError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("variable does not belong to this tape")]
    DetachedVariable,

    #[error("Björck projection failed: {0}")]
    RankDeficient(String),

    #[error("Cayley solve residual {residual:e} exceeds tolerance")]
    CayleyResidual { residual: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("model is not frozen; call freeze() before inference")]
    NotFrozen,

    #[error("gradient undefined at this input: {0}")]
    Tie(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("Jacobian too large: {rows}×{cols} exceeds the {limit}-row guard")]
    JacobianTooLarge {
        rows: usize,
        cols: usize,
        limit: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = UgnnError> = std::result::Result<T, E>;
