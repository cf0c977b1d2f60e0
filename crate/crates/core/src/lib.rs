//! Knowledge injection into a toy decoder transformer through rectangular
//! attention over projected knowledge-base entries, with a supervised
//! retrieval layer and top-k KB compression at inference.

pub mod cli;
pub mod datagen;
mod error;
pub mod eval;
pub mod kb;
pub mod model;
pub mod numeric;
pub mod retrieval;
pub mod training;

pub use error::{Error, Result};
