pub mod autodiff;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod hypothesis;
pub mod io;
pub mod model;
pub mod nn;
pub mod overlay;
pub mod pnm;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
