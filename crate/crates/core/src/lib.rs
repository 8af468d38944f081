pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod model;
pub mod oracle;
pub mod render;
pub mod taskgen;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Float, Mask, Tensor};
