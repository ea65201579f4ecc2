use thiserror::Error;

/// Failure modes of the wire codec.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("message truncated: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    BadVersion(u8),
    #[error("unknown dtype tag {0}")]
    BadDtype(u8),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("dtype mismatch: expected tag {expected}, found {found}")]
    DtypeMismatch { expected: u8, found: u8 },
    #[error("unexpected message content: {0}")]
    Malformed(&'static str),
    #[error("trailing bytes after message")]
    Trailing,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("mask is all-true or all-false")]
    DegenerateMask,
    #[error("gaussian sigma must be positive and finite, got {0}")]
    InvalidSigma(f64),
    #[error("class {0} is not present in the label")]
    MissingClass(u8),
    #[error("shape mismatch: {0}")]
    Shape(&'static str),
    #[error("forward cache does not belong to the current parameters")]
    StaleCache,
    #[error("batch has neither reliable nor unreliable samples")]
    EmptyBatch,
    #[error("could not place shapes after {attempts} attempts")]
    Placement { attempts: usize },
    #[error("invalid configuration: {0}")]
    Config(&'static str),
    #[error("wire: {0}")]
    Wire(#[from] WireError),
}

pub type Result<T> = core::result::Result<T, Error>;
