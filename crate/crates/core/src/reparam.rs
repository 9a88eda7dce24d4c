//! Exact rewrite of a convolution mixer as multi-head self-attention.
//!
//! A `K×K` convolution becomes `K²` heads, one per offset `δ` of the
//! receptive field in row-major order. Head `k` has zero query and key
//! projections, an identity value projection, `W^O_k = W^C_{δ_k}` and a
//! relative bias that is `β` at `δ_k` and zero elsewhere, so its attention is
//! one-hot on the token at `p + δ_k`, or on the zero pad slot when that token
//! is off the grid.

use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::{
    conv_mixer_forward, mhsa_forward, AttnMixer, ConvMixer, GridShape, HybridBlock, MixerMode,
    TokenGrid,
};
use crate::tensor::Tensor;

pub fn reparameterize(conv: &ConvMixer, grid: GridShape, beta: f32) -> Result<AttnMixer> {
    let (k, d) = (conv.kernel_size(), conv.dim());
    if k % 2 == 0 {
        return Err(Error::EvenKernel(k));
    }
    if grid.height == 0 || grid.width == 0 {
        return Err(Error::Geometry("empty token grid".into()));
    }
    let r = k / 2;
    if r >= grid.height || r >= grid.width {
        return Err(Error::Geometry(format!(
            "a {k}x{k} kernel needs a token grid of at least {}x{}, got {}x{}",
            r + 1,
            r + 1,
            grid.height,
            grid.width
        )));
    }
    let heads = k * k;
    let inner = heads * d;
    let (rh, rw) = grid.rel_extent();

    let mut w_v = Tensor::zeros(vec![d, inner]);
    let mut w_o = Tensor::zeros(vec![inner, d]);
    let mut rel_bias = Tensor::zeros(vec![heads, rh, rw]);
    for ky in 0..k {
        for kx in 0..k {
            let h = ky * k + kx;
            for i in 0..d {
                w_v.set(&[i, h * d + i], 1.0);
            }
            let o = h * d * d;
            w_o.data_mut()[o..o + d * d].copy_from_slice(conv.tap(ky, kx).data());
            // δ = (ky − r, kx − r), stored at δ + (h_t − 1, w_t − 1)
            rel_bias.set(
                &[h, ky + grid.height - 1 - r, kx + grid.width - 1 - r],
                beta,
            );
        }
    }
    let m = AttnMixer {
        heads,
        head_dim: d,
        grid,
        w_q: Tensor::zeros(vec![d, inner]),
        w_k: Tensor::zeros(vec![d, inner]),
        w_v,
        w_o,
        rel_bias,
        bias: Tensor::new(vec![d], conv.bias.data().to_vec())?,
        pad_token: true,
    };
    m.validate()?;
    Ok(m.trainable())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReparamReport {
    pub num_samples: usize,
    pub max_abs_diff: f32,
    /// `[h_t][w_t]`, maximum over samples and channels.
    pub per_position_max: Vec<Vec<f32>>,
    pub tolerance: f32,
    pub pass: bool,
}

/// Compares both mixers on `num_samples` unit-normal token grids.
pub fn verify_equivalence(
    conv: &ConvMixer,
    attn: &AttnMixer,
    num_samples: usize,
    tolerance: f32,
    seed: u64,
) -> Result<ReparamReport> {
    let grid = attn.grid;
    let mut rng = StdRng::seed_from_u64(seed);
    let mut per = vec![vec![0.0f32; grid.width]; grid.height];
    for _ in 0..num_samples {
        let x = TokenGrid::randn(1, grid, conv.dim(), 1.0, &mut rng);
        accumulate_diff(&x, conv, attn, &mut per)?;
    }
    Ok(report(per, num_samples, tolerance))
}

/// Same comparison on caller-supplied inputs.
pub fn verify_on(
    conv: &ConvMixer,
    attn: &AttnMixer,
    inputs: &[TokenGrid],
    tolerance: f32,
) -> Result<ReparamReport> {
    let grid = attn.grid;
    let mut per = vec![vec![0.0f32; grid.width]; grid.height];
    let mut n = 0;
    for x in inputs {
        accumulate_diff(x, conv, attn, &mut per)?;
        n += x.batch();
    }
    Ok(report(per, n, tolerance))
}

fn accumulate_diff(
    x: &TokenGrid,
    conv: &ConvMixer,
    attn: &AttnMixer,
    per: &mut [Vec<f32>],
) -> Result<()> {
    let a = conv_mixer_forward(x, conv)?;
    let b = mhsa_forward(x, attn)?;
    let d = x.dim();
    let g = x.grid();
    for bi in 0..x.batch() {
        for r in 0..g.height {
            for c in 0..g.width {
                let (ta, tb) = (a.token(bi, r, c), b.token(bi, r, c));
                let m = (0..d).map(|i| (ta[i] - tb[i]).abs()).fold(0.0f32, f32::max);
                per[r][c] = per[r][c].max(m);
            }
        }
    }
    Ok(())
}

fn report(per: Vec<Vec<f32>>, num_samples: usize, tolerance: f32) -> ReparamReport {
    let max_abs_diff = per.iter().flatten().copied().fold(0.0f32, f32::max);
    ReparamReport {
        num_samples,
        max_abs_diff,
        per_position_max: per,
        tolerance,
        pass: max_abs_diff < tolerance,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SwitchOutcome {
    Switched,
    /// The block already ran self-attention; nothing changed.
    AlreadyAttention,
}

/// Moves a convolution block to attention mode with transferred weights.
/// The convolution stays stored with gradients disabled.
pub fn switch_block(block: &mut HybridBlock, grid: GridShape, beta: f32) -> Result<SwitchOutcome> {
    if block.mode == MixerMode::SelfAttention {
        return Ok(SwitchOutcome::AlreadyAttention);
    }
    let conv = block.conv.as_mut().ok_or(Error::MissingMixer(0))?;
    let attn = reparameterize(conv, grid, beta)?;
    conv.set_trainable(false);
    block.attn = Some(attn);
    block.mode = MixerMode::SelfAttention;
    Ok(SwitchOutcome::Switched)
}
