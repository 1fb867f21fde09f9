//! Sequence-based LiDAR place recognition: range projection, overlap
//! labelling, a yaw-invariant sequence descriptor, training and retrieval.

mod binio;
pub mod datasets;
pub mod error;
pub mod model;
pub mod nn;
pub mod overlap;
pub mod rangeproj;
pub mod retrieval;
pub mod training;

pub use error::{Error, Result};
