use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible operand shapes; carries both so messages are actionable.
    #[error("{op}: shape mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {msg}")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        msg: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    /// API contract violated (non-scalar loss, mixed tapes, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
}

pub type Result<T> = std::result::Result<T, Error>;
