pub mod distance;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod img;
pub mod io;
pub mod loss;
pub mod math;
pub mod morphable;
pub mod parallel;
pub mod render;
pub mod sh;
pub mod train;

pub use error::{Error, Result};
