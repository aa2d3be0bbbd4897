use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch, expected {expected:?}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Param { op: &'static str, msg: String },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("not a checkpoint")]
    NotACheckpoint,
    #[error("checkpoint truncated at byte offset {offset}")]
    Truncated { offset: usize },
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("model name mismatch: expected {expected}, found {found}")]
    ModelMismatch { expected: String, found: String },
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn shape_err<T>(op: &'static str, expected: &[usize], got: &[usize]) -> Result<T> {
    Err(Error::Shape {
        op,
        expected: expected.to_vec(),
        got: got.to_vec(),
    })
}

pub(crate) fn param_err<T>(op: &'static str, msg: impl Into<String>) -> Result<T> {
    Err(Error::Param {
        op,
        msg: msg.into(),
    })
}
