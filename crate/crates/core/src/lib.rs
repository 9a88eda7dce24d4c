//! Hybrid convolution / self-attention vision transformer blocks.
//!
//! Token mixers start as convolutions and can be rewritten, exactly, as
//! multi-head self-attention with a relative position bias. A per-layer
//! schedule decides when each block switches, and the spectral tools measure
//! how each layer filters its feature maps.

#![allow(clippy::needless_range_loop)]

pub mod error;
pub mod nn;
pub mod reparam;
pub mod schedule;
pub mod spectral;
pub mod store;
pub mod tensor;

pub use error::{Error, Result};
pub use nn::{
    AttnMixer, ConvMixer, GridShape, HybridBlock, MixerMode, Model, ModelConfig, PatchEmbed,
    TokenGrid,
};
pub use reparam::{reparameterize, switch_block, verify_equivalence, ReparamReport, SwitchOutcome};
pub use schedule::{PrSchedule, ScheduleKind, SwitchEvent};
pub use tensor::{Graph, Tensor, Var};
