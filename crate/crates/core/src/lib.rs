pub mod active;
pub mod codec;
pub mod dataset;
pub mod error;
pub mod forge;
pub mod io;
pub mod net;
pub mod rng;
pub mod select;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
