use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("rotation is not yaw-dominant (z axis tilted by {tilt:e})")]
    NonPlanarRotation { tilt: f64 },

    #[error("rotation matrix is not orthonormal (max deviation {deviation:e})")]
    NotOrthonormal { deviation: f64 },

    #[error("invalid grid: size {size}, spacing {spacing}")]
    InvalidGrid { size: usize, spacing: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("too many queries for one packet: {0}")]
    TooManyQueries(usize),

    #[error("queries carry mixed feature dimensions ({first} and {other})")]
    MixedFeatureDims { first: usize, other: usize },

    #[error("BadMagic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("BadVersion: {0}")]
    BadVersion(u16),

    #[error("TruncatedPacket: need {needed} bytes, have {available}")]
    TruncatedPacket { needed: usize, available: usize },

    #[error("CrcMismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },

    #[error("could not place object {index} after {attempts} attempts")]
    PlacementFailure { index: usize, attempts: usize },

    #[error("loss over an empty batch")]
    EmptyBatch,

    #[error("loss diverged at epoch {epoch} (value {value})")]
    DivergedLoss { epoch: usize, value: f64 },

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// Short stable name of the variant, used by the CLI when reporting
    /// decode failures.
    pub fn name(&self) -> &'static str {
        match self {
            Error::NonPlanarRotation { .. } => "NonPlanarRotation",
            Error::NotOrthonormal { .. } => "NotOrthonormal",
            Error::InvalidGrid { .. } => "InvalidGrid",
            Error::DimMismatch { .. } => "DimMismatch",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::TooManyQueries(_) => "TooManyQueries",
            Error::MixedFeatureDims { .. } => "MixedFeatureDims",
            Error::BadMagic { .. } => "BadMagic",
            Error::BadVersion(_) => "BadVersion",
            Error::TruncatedPacket { .. } => "TruncatedPacket",
            Error::CrcMismatch { .. } => "CrcMismatch",
            Error::PlacementFailure { .. } => "PlacementFailure",
            Error::EmptyBatch => "EmptyBatch",
            Error::DivergedLoss { .. } => "DivergedLoss",
            Error::Invalid(_) => "Invalid",
            Error::Parse(_) => "Parse",
        }
    }
}
