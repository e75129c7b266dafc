pub mod audio;
pub mod autograd;
pub mod backend;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod episodic;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod manifest;
pub mod model;
pub mod params;
pub mod plot;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
