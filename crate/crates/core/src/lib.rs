//! Speech codec, acoustic model and training loop for a jointly trained
//! text-to-speech system whose intermediate representation is a learned,
//! vector-quantized latent at 80 frames per second.

pub mod acoustic;
pub mod codec;
pub mod config;
pub mod data;
pub mod discriminators;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nn;
pub mod quantizer;
pub mod state;
pub mod training;

pub use error::{Error, Result};
