#![allow(dead_code)]

use num_traits::Float;
use prs_core::nn::{HybridBlock, MixerMode, Model, Params};
use prs_core::tensor::ops::LAYER_NORM_EPS;
use prs_core::Tensor;
use prs_oracle::{Arr, Mode, ParamMap, RefConfig};

pub fn arr<F: Float>(t: &Tensor) -> Arr<F> {
    Arr::from_f32(t.shape(), t.data())
}

pub fn params_of<F: Float>(p: &impl Params, prefix: &str) -> ParamMap<F> {
    let mut m = ParamMap::new();
    p.visit(prefix, &mut |name, t| {
        m.insert(name.to_string(), arr(t));
    });
    m
}

pub fn ref_config(model: &Model) -> RefConfig {
    let c = &model.config;
    RefConfig {
        patch: c.patch,
        in_channels: c.in_channels,
        dim: c.dim,
        kernel: c.kernel,
        heads: c.kernel * c.kernel,
        head_dim: c.dim,
        mlp_hidden: c.dim * c.mlp_ratio,
        classes: c.classes,
        head_norm: c.head_norm,
        abs_pos: c.abs_pos,
        pad_token: true,
        eps: LAYER_NORM_EPS as f64,
        modes: model.modes().iter().map(|&m| mode(m)).collect(),
    }
}

pub fn mode(m: MixerMode) -> Mode {
    match m {
        MixerMode::Conv => Mode::Conv,
        MixerMode::SelfAttention => Mode::Attn,
    }
}

/// Oracle config for a single block stored under `blocks.0`.
pub fn block_config(b: &HybridBlock) -> RefConfig {
    let (heads, head_dim, pad) = match &b.attn {
        Some(a) => (a.heads, a.head_dim, a.pad_token),
        None => (1, b.dim(), true),
    };
    RefConfig {
        patch: 1,
        in_channels: b.dim(),
        dim: b.dim(),
        kernel: b.conv.as_ref().map_or(1, |c| c.kernel_size()),
        heads,
        head_dim,
        mlp_hidden: b.mlp.fc1.output_dim(),
        classes: 1,
        head_norm: false,
        abs_pos: false,
        pad_token: pad,
        eps: LAYER_NORM_EPS as f64,
        modes: vec![mode(b.mode)],
    }
}

pub fn max_abs(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}
