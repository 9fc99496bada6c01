use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Which side of a binary mask an error refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSide {
    Foreground,
    Background,
}

impl fmt::Display for MaskSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskSide::Foreground => f.write_str("foreground"),
            MaskSide::Background => f.write_str("background"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("degenerate mask: {0} region is empty")]
    EmptyMaskRegion(MaskSide),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn contract(detail: impl Into<String>) -> Self {
        Error::Contract(detail.into())
    }

    pub(crate) fn degenerate(detail: impl Into<String>) -> Self {
        Error::Degenerate(detail.into())
    }
}
