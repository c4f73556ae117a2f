//! Multi-label next-token supervision for vision tokens and dense decoding
//! from vocabulary-indexed logits.

pub mod codec;
pub mod decode;
pub mod depthq;
pub mod error;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod synthlab;
pub mod targets;
pub mod vocab;

pub use error::{Error, Result};
