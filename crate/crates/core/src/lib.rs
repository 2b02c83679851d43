pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod suite;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Tape, Tensor, Var};
