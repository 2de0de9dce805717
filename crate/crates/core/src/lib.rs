pub mod acca;
pub mod cli;
pub mod error;
pub mod evalkit;
pub mod io;
pub mod ldrm;
pub mod losses;
pub mod nn;
pub mod pyramid;
pub mod tensor;
pub mod training;
pub mod wcca;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::{Real, Tape, Tensor, Var};
