//! Spatio-temporal consistency training for single-image semantic
//! segmentation on synthetic RGBD video.

pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod persist;
pub mod report;
pub mod scenegen;
pub mod segmenter;
pub mod tensor;

pub use error::{Error, Result};
