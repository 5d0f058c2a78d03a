pub mod autograd;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod model;
pub mod raster;
pub mod rng;
pub mod saan;
pub mod training;

pub use error::{Error, Result};
