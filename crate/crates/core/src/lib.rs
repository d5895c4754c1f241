pub mod commands;
pub mod error;
pub mod eval;
pub mod features;
pub mod flows;
pub mod grid;
pub mod model;
pub mod nn;
pub mod synth;
pub mod train;
pub mod trajectory;

pub use error::{Error, Result};
