//! Toy bidirectional transformer with MLM and CLS scoring heads.

pub mod checkpoint;
mod config;
mod encoder;
mod vocab;

pub use config::ModelConfig;
pub use encoder::{Batch, Bound, Counters, EncoderModel};
pub use vocab::{Vocab, CLS, MASK, PAD, RESERVED, SEP, UNK};
