use std::f64::consts::{E, PI};

use prs_core::nn::{GridShape, MixerMode, Model, ModelConfig, TokenGrid};
use prs_core::spectral::{
    delta_log_amplitude, depth_profile, depth_profile_from_grids, feature_spectrum, SpectrumConfig,
    Tap, TARGETS,
};
use prs_core::{PrSchedule, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn axis_freq(k: usize, n: usize) -> f64 {
    let signed = if 2 * k <= n {
        k as f64
    } else {
        k as f64 - n as f64
    };
    2.0 * PI * signed / n as f64
}

/// Circular 3×3 correlation of every channel map with `taps` (row-major).
fn filter(x: &TokenGrid, taps: &[f32; 9]) -> TokenGrid {
    let GridShape {
        height: h,
        width: w,
    } = x.grid();
    let d = x.dim();
    let src = x.tensor().data();
    let mut out = vec![0.0f32; src.len()];
    for b in 0..x.batch() {
        for r in 0..h {
            for c in 0..w {
                for ch in 0..d {
                    let mut s = 0.0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let rr = (r + h + ky - 1) % h;
                            let cc = (c + w + kx - 1) % w;
                            s += taps[ky * 3 + kx] * src[((b * h + rr) * w + cc) * d + ch];
                        }
                    }
                    out[((b * h + r) * w + c) * d + ch] = s;
                }
            }
        }
    }
    TokenGrid::new(Tensor::new(x.tensor().shape().to_vec(), out).unwrap()).unwrap()
}

const BOX: [f32; 9] = [1.0 / 9.0; 9];

/// Expected binned `log(|H|·|N|)` for unit white noise `N` through a filter
/// with response `H`: `E log|N|` is `½(ln hw − γ)` for complex bins and
/// `½(ln hw − γ − ln 2)` where the DFT coefficient is real.
fn expected_profile(
    grid: GridShape,
    width: f64,
    response: impl Fn(f64, f64) -> f64,
) -> Vec<(f64, f64)> {
    let (h, w) = (grid.height, grid.width);
    let hw = (h * w) as f64;
    let n_bins = (PI / width).round() as usize + 1;
    let mut sums = vec![(0.0, 0usize); n_bins];
    for u in 0..h {
        for v in 0..w {
            let (fu, fv) = (axis_freq(u, h), axis_freq(v, w));
            let real = (2 * u) % h == 0 && (2 * v) % w == 0;
            let noise = 0.5 * (hw.ln() - EULER_GAMMA - if real { 2f64.ln() } else { 0.0 });
            let b = ((fu.hypot(fv)).min(PI) / width).round() as usize;
            sums[b].0 += response(fu, fv).abs().ln() + noise;
            sums[b].1 += 1;
        }
    }
    sums.iter()
        .enumerate()
        .filter(|(_, s)| s.1 > 0)
        .map(|(i, s)| (i as f64 * width, s.0 / s.1 as f64))
        .collect()
}

fn box_response(u: f64, v: f64) -> f64 {
    (1.0 + 2.0 * u.cos()) * (1.0 + 2.0 * v.cos()) / 9.0
}

#[test]
fn box_blur_profile_matches_closed_form_response() {
    let grid = GridShape::new(32, 32);
    // 64 samples × 4 channels = 256 maps
    let noise = TokenGrid::randn(64, grid, 4, 1.0, &mut rng(1));
    let cfg = SpectrumConfig::default();
    let p = feature_spectrum(&filter(&noise, &BOX), &cfg).unwrap();
    assert_eq!(p.n_maps, 256);
    let want = expected_profile(grid, p.bin_width, box_response);
    assert_eq!(p.bins.len(), want.len());
    for (i, &(f, v)) in want.iter().enumerate() {
        assert!((p.bins[i] - f).abs() < 1e-12);
        if p.counts[i] > 1 {
            assert!(
                (p.log_amp[i] - v).abs() < 0.1,
                "bin {f}: {} vs {v}",
                p.log_amp[i]
            );
        }
    }
    // bin 0 holds one real coefficient per map; log|X| of a real Gaussian
    // has standard deviation π/√8, so the mean over 256 maps has σ ≈ 0.069
    let sigma = PI / 8f64.sqrt() / (p.n_maps as f64).sqrt();
    assert!(
        (p.log_amp[0] - want[0].1).abs() < 4.0 * sigma,
        "dc bin {} vs {}",
        p.log_amp[0],
        want[0].1
    );
    let expected_delta = want.last().unwrap().1 - want[0].1;
    let got = delta_log_amplitude(&p, PI).unwrap();
    assert!(got < 0.0, "low-pass gives negative Δ(π), got {got}");
    assert!(
        (got - expected_delta).abs() < 4.0 * sigma + 0.02,
        "Δ(π) {got} vs closed form {expected_delta}"
    );
}

#[test]
fn high_pass_kernel_gives_positive_delta() {
    let mut taps = [-1.0f32 / 9.0; 9];
    taps[4] += 1.0;
    let noise = TokenGrid::randn(32, GridShape::new(16, 16), 8, 1.0, &mut rng(2));
    let p = feature_spectrum(&filter(&noise, &taps), &SpectrumConfig::default()).unwrap();
    for f in TARGETS {
        let d = delta_log_amplitude(&p, f).unwrap();
        assert!(d > 0.0, "Δ({f}) = {d}");
    }
}

#[test]
fn impulse_profile_has_zero_delta_everywhere() {
    let mut data = vec![0.0f32; 8 * 8 * 2];
    data[0] = 1.0;
    data[1] = -3.0;
    let x = TokenGrid::new(Tensor::new(vec![1, 8, 8, 2], data).unwrap()).unwrap();
    let p = feature_spectrum(&x, &SpectrumConfig::default()).unwrap();
    for f in TARGETS {
        assert!(delta_log_amplitude(&p, f).unwrap().abs() < 1e-6);
    }
}

#[test]
fn repeated_blur_lowers_delta_at_nyquist_with_depth() {
    let mut x = TokenGrid::randn(16, GridShape::new(16, 16), 4, 1.0, &mut rng(3));
    let mut layers = Vec::new();
    for _ in 0..4 {
        x = filter(&x, &BOX);
        layers.push(x.clone());
    }
    let prof =
        depth_profile_from_grids(&layers, &SpectrumConfig::default(), Tap::PostResidual).unwrap();
    let at_pi: Vec<f64> = prof.entries.iter().map(|e| e.delta[2]).collect();
    assert!(at_pi.windows(2).all(|p| p[1] < p[0]), "{at_pi:?}");
    assert!(prof.slope(2).unwrap() < 0.0);
}

fn patch_one_config(depth: usize, dim: usize, side: usize) -> ModelConfig {
    ModelConfig {
        image_height: side,
        image_width: side,
        in_channels: dim,
        patch: 1,
        dim,
        depth,
        ..ModelConfig::default()
    }
}

/// Patch projection set to the identity so images are the token grid.
fn identity_embed(m: &mut Model) {
    let d = m.config.dim;
    m.patch_embed.proj.weight = Tensor::eye(d);
    m.patch_embed.proj.bias = Tensor::zeros(vec![d]);
}

#[test]
fn untrained_model_on_white_noise_is_nearly_flat_across_depth() {
    let config = patch_one_config(4, 16, 8);
    let mut r = rng(4);
    let mut model = Model::new(config, &[MixerMode::Conv; 4], &mut r).unwrap();
    identity_embed(&mut model);
    let images = Tensor::randn(vec![256, 8, 8, 16], 1.0, &mut r);
    let schedule = PrSchedule::prs(10, 4).unwrap();
    let prof = depth_profile(
        &model,
        &images,
        1,
        &schedule,
        &SpectrumConfig::default(),
        Tap::PostResidual,
    )
    .unwrap();
    assert_eq!(prof.entries.len(), 4);
    for pair in prof.entries.windows(2) {
        for t in 0..3 {
            let step = (pair[1].delta[t] - pair[0].delta[t]).abs();
            assert!(
                step < 0.2,
                "layer {} -> {}: |ΔΔ| = {step}",
                pair[0].layer,
                pair[1].layer
            );
        }
    }
}

#[test]
fn blurring_blocks_make_delta_at_nyquist_fall_with_depth() {
    let d = 8;
    let config = patch_one_config(4, d, 16);
    let mut r = rng(5);
    let mut model = Model::new(config, &[MixerMode::Conv; 4], &mut r).unwrap();
    identity_embed(&mut model);
    for b in &mut model.blocks {
        let conv = b.conv.as_mut().unwrap();
        // every tap is (E/9)·I: a box blur of the normalised tokens
        conv.weight = Tensor::from_fn(vec![3, 3, d, d], |i| {
            if (i / d) % d == i % d {
                (E / 9.0) as f32
            } else {
                0.0
            }
        });
        conv.bias = Tensor::zeros(vec![d]);
        b.mlp.fc2.weight = Tensor::zeros(b.mlp.fc2.weight.shape().to_vec());
        b.mlp.fc2.bias = Tensor::zeros(vec![d]);
    }
    let images = Tensor::randn(vec![64, 16, 16, d], 1.0, &mut r);
    let schedule = PrSchedule::new(4, 4, prs_core::ScheduleKind::AllConv).unwrap();
    let prof = depth_profile(
        &model,
        &images,
        1,
        &schedule,
        &SpectrumConfig::default(),
        Tap::PostResidual,
    )
    .unwrap();
    let at_pi: Vec<f64> = prof.entries.iter().map(|e| e.delta[2]).collect();
    assert!(at_pi.windows(2).all(|p| p[1] < p[0]), "{at_pi:?}");
}

#[test]
fn single_block_model_has_one_entry_at_full_depth() {
    let config = ModelConfig {
        depth: 1,
        dim: 8,
        ..ModelConfig::default()
    };
    let mut r = rng(6);
    let model = Model::new(config, &[MixerMode::Conv], &mut r).unwrap();
    let images = Tensor::uniform(vec![4, 32, 32, 3], 0.0, 1.0, &mut r);
    let schedule = PrSchedule::prs(10, 1).unwrap();
    let prof = depth_profile(
        &model,
        &images,
        1,
        &schedule,
        &SpectrumConfig::default(),
        Tap::PreResidual,
    )
    .unwrap();
    assert_eq!(prof.entries.len(), 1);
    assert_eq!(prof.entries[0].depth, 1.0);
    assert_eq!(prof.tap, Tap::PreResidual);
    assert_eq!(prof.to_csv().lines().count(), 1 + 3);
}
