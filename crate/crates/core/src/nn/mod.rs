//! Patch embedding, token mixers, transformer blocks and the classifier.

mod attn;
mod block;
mod conv;
mod grid;
mod model;
mod patch;

pub use attn::{attention_scores, mhsa_forward, AttnMixer};
pub use block::{block_forward, BlockOutputs, HybridBlock, LayerNormParams, Linear, Mlp};
pub use conv::{conv_mixer_forward, ConvMixer};
pub use grid::{GridShape, TokenGrid};
pub use model::{model_forward, BlockLayout, Head, Model, ModelConfig, ModelOutputs};
pub use patch::{patch_embed_forward, PatchEmbed};

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::tensor::Tensor;

/// Which token mixer a block runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MixerMode {
    #[serde(rename = "conv")]
    Conv,
    #[serde(rename = "sa")]
    SelfAttention,
}

impl fmt::Display for MixerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MixerMode::Conv => "conv",
            MixerMode::SelfAttention => "sa",
        })
    }
}

/// Named access to every tensor a module owns, in a fixed order.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
