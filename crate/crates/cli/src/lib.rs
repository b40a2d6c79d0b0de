//! IO, file formats, parallel drivers, and the training loop around
//! `echoray-core`. See `docs/formats.md` for the on-disk layouts.

pub mod config;
pub mod dataio;
pub mod parallel;
pub mod pgm;
pub mod report;
pub mod trainer;

pub use echoray_core as core;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{module}: {source}")]
    Core {
        module: &'static str,
        #[source]
        source: echoray_core::CoreError,
    },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Format(String),
}

impl IoError {
    pub fn format(msg: impl Into<String>) -> Self {
        IoError::Format(msg.into())
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        IoError::Io {
            context: context.into(),
            source,
        }
    }
}

/// Attaches the owning module name to a core error, for CLI diagnostics.
pub fn core_err(module: &'static str) -> impl Fn(echoray_core::CoreError) -> IoError {
    move |source| IoError::Core { module, source }
}
