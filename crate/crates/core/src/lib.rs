pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod folding;
pub mod head;
pub mod image;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod quantizer;
pub mod rng;
pub mod sampler;
pub mod sequencer;
pub mod shapes;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
