pub mod algorithms;
pub mod analysis;
pub mod autodiff;
pub mod domains;
pub mod error;
pub mod harness;
pub mod model;

pub use error::{Error, Result};
