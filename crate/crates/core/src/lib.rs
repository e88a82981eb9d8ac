pub mod autograd;
pub mod corpus;
pub mod datagen;
pub mod error;
pub mod frontend;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;
pub mod wavelet;

pub use error::{Error, Result};
