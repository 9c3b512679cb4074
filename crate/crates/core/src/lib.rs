pub mod adapter;
pub mod diversify;
pub mod domains;
pub mod error;
pub mod federation;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
