pub mod balance;
pub mod dataset;
pub mod enhance;
pub mod error;
pub mod imageio;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod train_eval;
pub mod xai;

pub use error::{Error, Result};
