pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod metrics;
pub mod motion;
pub mod nn;
pub mod online;
pub mod rng;
pub mod svg;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
