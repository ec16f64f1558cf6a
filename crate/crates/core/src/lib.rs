//! Text-conditioned motion editing: similarity curves over source/target
//! pairs, a conditional diffusion transformer with an auxiliary per-frame
//! similarity head, synthetic data and evaluation metrics.

pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod exec;
pub mod model;
pub mod motion;
pub mod pipeline;
pub mod rng;
pub mod similarity;
pub mod synth;
pub mod tape;
pub mod text;
pub mod train;

pub use error::{Error, Result};
