pub mod cli;
pub mod degrade;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod geom;
pub mod infer;
pub mod io;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
