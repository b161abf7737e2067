//! Overlapping printed/handwritten text segmentation.

pub mod autodiff;
pub mod checkpoint;
pub mod crf;
pub mod datasynth;
pub mod error;
pub mod gradcheck;
pub mod labelcodec;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod ops;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
