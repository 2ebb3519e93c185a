use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    ShapeMismatch { context: &'static str, expected: String, found: String },
    InvalidArgument(String),
    ImageTooSmall { context: &'static str, min: usize, found: usize },
    EmptyInput(&'static str),
    NonFinite { term: &'static str, value: f64 },
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl fmt::Debug, found: impl fmt::Debug) -> Self {
        Error::ShapeMismatch { context, expected: alloc::format!("{expected:?}"), found: alloc::format!("{found:?}") }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { context, expected, found } => {
                write!(f, "{context}: shape mismatch, expected {expected}, found {found}")
            }
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::ImageTooSmall { context, min, found } => {
                write!(f, "{context}: image side {found} is smaller than the required {min}")
            }
            Error::EmptyInput(what) => write!(f, "{what}: empty input"),
            Error::NonFinite { term, value } => write!(f, "non-finite {term} loss ({value})"),
        }
    }
}

impl core::error::Error for Error {}
