use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite value {0} cannot be quantized")]
    NonFinite(f64),
    #[error("sketch width {k} exceeds feature-space width {d_sae}")]
    WidthExceedsFeatures { k: usize, d_sae: usize },
    #[error("invalid sketch: {0}")]
    InvalidSketch(String),
    #[error("identifier of {0} bytes exceeds the 65536-byte limit")]
    IdentifierTooLong(usize),
    #[error("malformed encoding: {0}")]
    Malformed(String),
    #[error("merkle tree needs at least one leaf")]
    EmptyTree,
    #[error("position {t} out of range for {len} positions")]
    PositionOutOfRange { t: u64, len: u64 },
    #[error("opening payload requires k = 32, got k = {0}")]
    PayloadWidth(usize),
    #[error("invalid probe: {0}")]
    InvalidProbe(String),
    #[error("invalid library: {0}")]
    InvalidLibrary(String),
    #[error("probe subset must be nonempty")]
    EmptySubset,
    #[error("probe index {index} out of range for {len} probes")]
    ProbeOutOfRange { index: usize, len: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("calibration grid is missing configuration {0}")]
    GridIncomplete(String),
    #[error("feature {0} does not occur in the library")]
    AbsentFeature(u32),
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Malformed(e.to_string())
    }
}
