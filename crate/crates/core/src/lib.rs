pub mod autograd;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evalharness;
pub mod experiment;
pub mod model;
pub mod nn;
pub mod objective;
pub mod params;
pub mod pipeline;
pub mod psg;
pub mod rng;
pub mod seqenc;
pub mod store;
pub mod synthetic;
pub mod trainer;
pub mod varinf;

pub use error::{Error, Result};
