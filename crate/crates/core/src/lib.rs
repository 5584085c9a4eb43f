//! Second-pass n-best rescoring with a toy bidirectional masked language model.

pub mod autodiff;
pub mod error;
pub mod io;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod scoring;

pub use error::{Error, Result};
