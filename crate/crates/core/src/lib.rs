//! Class-incremental continual learning for point-cloud semantic segmentation.
//!
//! The crate builds incremental learning scenarios over a class taxonomy,
//! trains a small per-point segmenter step by step with fine-tuning,
//! knowledge distillation or background self-inpainting, and scores every
//! step with per-class IoU, mIoU over class groups, point accuracy and
//! point precision.

pub mod error;
pub mod experiment;
pub mod inpaint;
pub mod ingest;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod scenario;
pub mod taxonomy;

pub use error::{Error, Result};
pub use taxonomy::{ClassId, ClassTaxonomy};
