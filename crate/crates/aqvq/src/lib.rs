//! File formats, experiment drivers and the command line for adaptive
//! vector quantization. The numerical core is `aqvq-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod idx;
pub mod report;

pub use error::{AppError, AppResult};
