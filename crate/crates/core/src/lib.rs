//! Single-shot sign detection: geometry, anchors, loss, a small CNN, dataset
//! formats, capture sessions and inference.

pub mod anchors;
pub mod capture;
pub mod dataset;
pub mod error;
pub mod fsutil;
pub mod geometry;
pub mod image;
pub mod infer;
pub mod loss;
pub mod net;

pub use error::{Error, Result};
