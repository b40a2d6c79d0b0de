use alloc::string::String;
use core::fmt;

/// Errors produced by the core algorithms.
///
/// IO-level failures (missing files, short reads) belong to the companion
/// crate; everything here is a contract or data problem detectable from pure
/// inputs.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// An index referred past the end of the Gaussian field.
    IndexOutOfRange { index: usize, len: usize },
    /// Invalid configuration value (zero-volume box, non-positive geometry, ...).
    Config(String),
    /// A pose matrix failed the rigidity checks.
    Pose(String),
    /// Mismatched dimensions between two images or buffers.
    Contract(String),
    /// A non-finite value was found in a Gaussian's parameters.
    NumericFault { gaussian: usize, what: &'static str },
    /// Scene blob did not start with the expected magic bytes or was cut short.
    CorruptScene(String),
    /// Scene blob has a version this build cannot read.
    UnsupportedVersion(u32),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::IndexOutOfRange { index, len } => {
                write!(f, "index {index} out of range for field of {len} Gaussians")
            }
            CoreError::Config(msg) => write!(f, "configuration error: {msg}"),
            CoreError::Pose(msg) => write!(f, "pose error: {msg}"),
            CoreError::Contract(msg) => write!(f, "contract violation: {msg}"),
            CoreError::NumericFault { gaussian, what } => {
                write!(f, "non-finite {what} in Gaussian {gaussian}")
            }
            CoreError::CorruptScene(msg) => write!(f, "corrupt scene data: {msg}"),
            CoreError::UnsupportedVersion(v) => write!(f, "unsupported scene version {v}"),
        }
    }
}

impl core::error::Error for CoreError {}
