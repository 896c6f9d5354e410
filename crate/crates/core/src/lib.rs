pub mod diffusion;
pub mod error;
pub mod image;
pub mod metrics;
pub mod morphing;
pub mod nn;
pub mod phantom;
pub mod rng;
pub mod supervision;
pub mod training;

pub use error::{DmmError, Result};
pub use image::Image;
