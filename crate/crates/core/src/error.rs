use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("input shape error: {0}")]
    InputShape(String),
    #[error("scale error: {0}")]
    Scale(&'static str),
    #[error("{0}: mask has no kept entries")]
    DegenerateMask(&'static str),
    #[error("{0}: empty selection")]
    EmptySelection(&'static str),
    #[error("invalid index {index} (length {len}) in {op}")]
    InvalidIndex {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("duplicate index {index} in {op}")]
    DuplicateIndex { op: &'static str, index: usize },
    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("geometry error: {0}")]
    Geometry(String),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
