pub mod csidata;
pub mod diffmath;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod neighbors;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
