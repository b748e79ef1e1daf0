pub mod cam;
pub mod data;
pub mod error;
pub mod localize;
pub mod metrics;
pub mod model;
pub mod pnm;
pub mod tensor;

pub use error::{Error, Result};
