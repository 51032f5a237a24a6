//! Coherent feed-forward video style transfer.

pub mod cli;
pub mod error;
pub mod eval;
pub mod flow;
pub mod image_io;
pub mod losses;
pub mod net;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
