//! Turning a frozen conditional generator into a source of informative
//! training images: generator pretraining, GAN inversion, latent
//! condensation and the evaluation harness.

pub mod augment;
pub mod condense;
pub mod data;
mod error;
pub mod eval;
pub mod gan;
pub mod inversion;
mod io;
pub mod models;
pub mod rng;
pub mod train;

pub use error::{CoreError, Result};
