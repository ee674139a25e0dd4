pub mod error;
pub mod eval;
pub mod features;
pub mod fusion;
pub mod geometry;
pub mod matching;
pub mod model;
pub mod nn;
pub mod selftest;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
