pub mod augment;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod model;
pub mod retrieval;
pub mod tensor;
pub mod train;

pub use augment::Mode;
pub use error::{Error, Result};
pub use tensor::{Graph, Scalar, Tensor, Var};
