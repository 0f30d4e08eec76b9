//! Online multi-speaker azimuth localization and tracking from multichannel audio.

pub mod angles;
pub mod dprtf;
pub mod error;
pub mod frontend;
pub mod io;
pub mod localizer;
pub mod metrics;
pub mod pipeline;
pub mod simulator;
pub mod tracker;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
