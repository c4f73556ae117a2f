//! Synthetic scenes, a tiny token-logit model, training and ablations.

mod experiment;
mod model;
pub mod precise;
mod scene;
mod train;

pub use experiment::*;
pub use model::*;
pub use scene::*;
pub use train::*;
