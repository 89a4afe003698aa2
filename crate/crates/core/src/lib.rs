pub mod autograd;
pub mod error;
pub mod gradcheck;
pub mod tensor;

pub use error::{PanoError, Result};
pub mod geometry;
pub mod pano;
pub mod generator;
pub mod nn;
pub mod structure;
pub mod dataset;
pub mod supervision;
pub mod checkpoint;
pub mod pipeline;
pub mod trainer;
