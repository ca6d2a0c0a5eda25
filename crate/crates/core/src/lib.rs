pub mod checkpoint;
pub mod data;
pub mod distributions;
pub mod error;
pub mod eval;
pub mod model;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
