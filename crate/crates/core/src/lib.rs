pub mod classify;
pub mod cli;
pub mod error;
pub mod manifold;
pub mod model_file;
pub mod moica;
pub mod patches;
pub mod synth;
pub mod whitening;

pub use error::{Error, Result};
