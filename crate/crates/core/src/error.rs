use alloc::string::String;
use core::fmt;

/// Errors raised by the algorithmic core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Input text or record does not follow the expected layout.
    Format(String),
    /// Ingestion produced no usable sequences.
    EmptyCorpus,
    /// A sequence needs at least one history item and one target.
    TooShort { len: usize },
    /// A numeric parameter is out of its allowed range.
    Parameter(String),
    /// Not enough distinct points to fit the requested codebook.
    DegenerateData(String),
    /// Non-finite values or mismatched dimensions in data.
    Data(String),
    /// A computation hit a zero norm or similar numeric singularity.
    Numeric(String),
    /// Configuration fields are inconsistent.
    Config(String),
    /// Tensor shapes do not line up.
    Shape(String),
    /// Model input is unusable (e.g. nothing to encode).
    Input(String),
    /// Decoder state is invalid for the requested step.
    State(String),
    /// Training produced a non-finite loss.
    Divergence(String),
    /// The decoding catalog is empty or inconsistent.
    Catalog(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::EmptyCorpus => f.write_str("corpus has no usable interaction sequences"),
            Error::TooShort { len } => {
                write!(f, "sequence of length {len} is too short (need at least 2)")
            }
            Error::Parameter(m) => write!(f, "parameter error: {m}"),
            Error::DegenerateData(m) => write!(f, "degenerate data: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Input(m) => write!(f, "input error: {m}"),
            Error::State(m) => write!(f, "state error: {m}"),
            Error::Divergence(m) => write!(f, "training diverged: {m}"),
            Error::Catalog(m) => write!(f, "catalog error: {m}"),
        }
    }
}

impl core::error::Error for Error {}
