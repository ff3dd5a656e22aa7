pub mod cli;
pub mod cluster;
pub mod detector;
mod container;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod labeling;
pub mod patch;
pub mod pipeline;
pub mod roi;
pub mod synth;
pub mod template;
pub mod training;
pub mod verifier;

pub use error::{Error, Result};
