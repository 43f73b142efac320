//! Synthetic depth-of-field toolkit: a defocus-guided layered renderer, image
//! quality metrics and losses, pair alignment, a runtime benchmark harness and
//! the storage/aggregation side of a mean-opinion-score study.

pub mod align;
pub mod bench;
pub mod canonical;
pub mod error;
pub mod eval;
pub mod image;
pub mod metrics;
pub mod render;
pub mod study;
pub mod wavelet;

pub use error::{Error, Result};
pub use image::{ImageF, Kernel2D};
