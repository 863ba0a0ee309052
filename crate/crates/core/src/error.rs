//! Error type shared across the crate.

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes of the library.
#[derive(Debug)]
pub enum Error {
    /// A point maps too close to the line at infinity, or a matrix cannot be
    /// renormalized to have its (3,3) entry equal to one.
    DegenerateProjection(String),
    /// The correspondence set cannot determine a homography (rank deficiency
    /// detected through the singular-value gap of the design matrix).
    DegenerateConfiguration(String),
    /// Grid or matrix dimensions do not agree.
    DimensionMismatch { expected: String, got: String },
    /// A triangular factor has a (near-)zero diagonal entry.
    RankDeficient(String),
    /// The projection basis Gram matrix is numerically singular.
    SingularBasis(String),
    /// Too few observations, or the normal matrix is too ill-conditioned.
    UnderdeterminedSystem(String),
    /// Image gradient energy is below the usable threshold.
    NoTexture(String),
    /// A masked reduction has no valid pixels.
    EmptyMask,
    /// A benchmark spec cannot be realized (base image too small, block too big).
    SpecInfeasible(String),
    /// A configuration value violates its documented range.
    InvalidConfig(String),
    /// Non-finite value where a finite one is required.
    NonFinite(&'static str),
    /// File does not start with the expected magic bytes.
    BadMagic { expected: &'static str, got: [u8; 4] },
    /// File ended before the header-declared payload.
    TruncatedFile { expected: usize, got: usize },
    /// Header declares dimensions beyond the format's limits.
    DimensionOverflow { width: i64, height: i64 },
    /// Recognized but unsupported container variant (e.g. ASCII or color PNM).
    UnsupportedFormat(String),
    /// Header is syntactically invalid.
    BadHeader(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DegenerateProjection(msg) => write!(f, "degenerate projection: {msg}"),
            Self::DegenerateConfiguration(msg) => {
                write!(f, "degenerate configuration: {msg}")
            }
            Self::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            Self::RankDeficient(msg) => write!(f, "rank deficient: {msg}"),
            Self::SingularBasis(msg) => write!(f, "singular basis: {msg}"),
            Self::UnderdeterminedSystem(msg) => write!(f, "underdetermined system: {msg}"),
            Self::NoTexture(msg) => write!(f, "no texture: {msg}"),
            Self::EmptyMask => write!(f, "empty validity mask"),
            Self::SpecInfeasible(msg) => write!(f, "spec infeasible: {msg}"),
            Self::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Self::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Self::BadMagic { expected, got } => {
                write!(f, "bad magic: expected {expected:?}, got {got:02x?}")
            }
            Self::TruncatedFile { expected, got } => {
                write!(f, "truncated file: expected {expected} bytes, got {got}")
            }
            Self::DimensionOverflow { width, height } => {
                write!(f, "dimensions {width}x{height} overflow the format limit")
            }
            Self::UnsupportedFormat(msg) => write!(f, "unsupported format: {msg}"),
            Self::BadHeader(msg) => write!(f, "bad header: {msg}"),
            Self::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Self::Io(err)
    }
}
