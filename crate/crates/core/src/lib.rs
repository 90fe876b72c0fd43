//! Latent text-to-image diffusion with domain adaptation, plus the fidelity and
//! factual-correctness evaluation toolkit around it.

pub mod adaptation;
pub mod autograd;
pub mod checkpoint;
pub mod correctness;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod fidelity;
pub mod image;
pub mod latent;
pub mod nn;
pub mod params;
pub mod pipeline;

pub use error::{Error, Result};
