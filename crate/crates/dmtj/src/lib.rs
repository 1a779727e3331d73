//! File formats, the training driver, probes, exports and ablations on top
//! of `dmtj-core`.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod export;
pub mod train;

pub use error::{IoError, IoResult};
