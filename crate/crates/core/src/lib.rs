pub mod commands;
pub mod control;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod model;
pub mod motion;
pub mod numerics;
pub mod text;
pub mod train;
pub use error::{Error, Result};
