//! Trainable network components and their building blocks.

pub mod layers;
pub mod text_encoder;
pub mod tokenizer;
pub mod unet;
pub mod vae;

use crate::autograd::Var;

pub use layers::Grid;
pub use text_encoder::{TextEncoder, TextEncoderConfig};
pub use tokenizer::Tokenizer;
pub use unet::{UNet, UNetConfig};
pub use vae::{Vae, VaeConfig, VaeTrainConfig};

/// Cross-attention context inside a graph: `[batch*len, d]` rows, of which the
/// first `lens[b]` per sample are real tokens.
#[derive(Clone, Debug)]
pub struct Context {
    pub var: Var,
    pub lens: Vec<usize>,
    pub len: usize,
}
