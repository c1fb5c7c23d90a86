pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod heatmap;
pub mod localization;
pub mod loss;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod spatial;
pub mod synth;
pub mod temporal;
pub mod tensor;
pub mod train;
pub mod unimodal;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
