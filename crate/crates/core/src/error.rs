use thiserror::Error;

use crate::validate::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("frame index {index} out of range for a sequence of {frames} frames")]
    FrameOutOfRange { index: usize, frames: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("rank-deficient frame {0}: observed joints are coincident")]
    RankDeficientFrame(usize),
    #[error("degenerate pose: {0}")]
    DegeneratePose(String),
    #[error("insufficient training poses: need at least {needed}, got {got}")]
    InsufficientTrainingPoses { needed: usize, got: usize },
    #[error("invalid value: {}", format_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("{0}")]
    Format(#[from] FormatError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("configuration error: {0}")]
    Config(String),
}

/// Problems with the contents of a binary file, each with a stable code.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unexpected end of stream")]
    UnexpectedEof,
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),
    #[error("non-finite value at element {0}")]
    NonFinite(usize),
    #[error("negative mass in heat map (frame {frame}, joint {joint})")]
    NegativeMass { frame: usize, joint: usize },
    #[error("zero mass in heat map (frame {frame}, joint {joint})")]
    ZeroMass { frame: usize, joint: usize },
    #[error("{0} trailing bytes after the payload")]
    TrailingBytes(usize),
    #[error("bad metadata: {0}")]
    Metadata(String),
}

impl FormatError {
    pub fn code(&self) -> &'static str {
        match self {
            FormatError::BadMagic { .. } => "bad-magic",
            FormatError::UnsupportedVersion(_) => "unsupported-version",
            FormatError::UnexpectedEof => "unexpected-eof",
            FormatError::InvalidDimensions(_) => "invalid-dimensions",
            FormatError::NonFinite(_) => "non-finite",
            FormatError::NegativeMass { .. } => "negative-mass",
            FormatError::ZeroMass { .. } => "zero-mass",
            FormatError::TrailingBytes(_) => "trailing-bytes",
            FormatError::Metadata(_) => "bad-metadata",
        }
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

pub(crate) fn ensure_dims(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(msg()))
    }
}
