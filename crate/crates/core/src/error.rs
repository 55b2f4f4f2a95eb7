use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the engine.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("network spec error at layer {layer}: {reason}")]
    Build { layer: usize, reason: String },
    #[error("unknown profile `{0}`")]
    UnknownProfile(String),
    #[error("tap shapes differ: teacher {teacher:?}, student {student:?}")]
    TapIncompatible {
        teacher: Vec<usize>,
        student: Vec<usize>,
    },
    #[error("pose generation failed after {0} attempts: skeleton does not fit the frame")]
    PoseOutOfFrame(usize),
    #[error("loss became non-finite at iteration {0}")]
    Diverged(usize),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
