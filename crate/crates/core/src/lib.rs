pub mod cli;
pub mod complexasa;
pub mod denoisenet;
pub mod error;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod numcore;
pub mod repairnet;
pub mod spectral;

pub use error::{Error, Result};
