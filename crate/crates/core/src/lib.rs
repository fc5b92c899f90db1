pub mod attacks;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;

pub use error::{Error, Result};
pub mod loss;
pub mod model;
