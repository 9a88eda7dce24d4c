mod common;

use common::{arr, block_config, params_of, ref_config};
use prs_core::nn::{AttnMixer, GridShape, HybridBlock, MixerMode, Model, ModelConfig, Params};
use prs_core::tensor::{finite_diff_check, finite_diff_check_ref, rel_err, GradCheckConfig};
use prs_core::{Graph, Tensor, Var};
use prs_oracle as oracle;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn unit(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut rng(seed))
}

fn assert_pass(name: &str, r: &prs_core::tensor::GradCheckReport) {
    assert!(
        r.pass,
        "{name}: max rel err {} ({} entries)",
        r.max_rel_err,
        r.entries.len()
    );
}

#[test]
fn matmul_gradient() {
    let b = unit(&[4, 3], 2);
    let f = |g: &mut Graph, a: Var| {
        let bv = g.constant(b.clone())?;
        let c = g.matmul(a, bv)?;
        g.sum(c)
    };
    assert_pass(
        "matmul",
        &finite_diff_check(f, &unit(&[5, 4], 1), &GradCheckConfig::default()).unwrap(),
    );
    // and with respect to the right operand
    let a = unit(&[5, 4], 3);
    let f = |g: &mut Graph, bv: Var| {
        let av = g.constant(a.clone())?;
        let c = g.matmul(av, bv)?;
        g.sum(c)
    };
    assert_pass(
        "matmul rhs",
        &finite_diff_check(f, &b, &GradCheckConfig::default()).unwrap(),
    );
}

fn check_ref<F, R>(name: &str, f: F, reference: R, x: &Tensor)
where
    F: Fn(&mut Graph, Var) -> prs_core::Result<Var>,
    R: Fn(&[f64]) -> Vec<f64>,
{
    let r = finite_diff_check_ref(f, reference, x, &GradCheckConfig::default()).unwrap();
    assert_pass(name, &r);
}

fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// `[b, m, k]·[b, k, n]` (or `[b, n, k]` transposed) in f64.
fn bmm64(
    a: &[f64],
    b: &[f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    for p in 0..batch {
        for i in 0..m {
            for j in 0..n {
                out[(p * m + i) * n + j] = (0..k)
                    .map(|t| {
                        let bv = if trans_b {
                            b[(p * n + j) * k + t]
                        } else {
                            b[(p * k + t) * n + j]
                        };
                        a[(p * m + i) * k + t] * bv
                    })
                    .sum();
            }
        }
    }
    out
}

#[test]
fn bmm_gradients() {
    for trans in [false, true] {
        let other = unit(if trans { &[2, 5, 3] } else { &[2, 3, 5] }, 4);
        let lhs = unit(&[2, 4, 3], 6);
        let (o64, l64) = (f64s(&other), f64s(&lhs));
        let f = |g: &mut Graph, a: Var| {
            let o = g.constant(other.clone())?;
            g.bmm(a, o, trans)
        };
        check_ref("bmm lhs", f, |a| bmm64(a, &o64, 2, 4, 3, 5, trans), &lhs);
        let f = |g: &mut Graph, o: Var| {
            let a = g.constant(lhs.clone())?;
            g.bmm(a, o, trans)
        };
        check_ref("bmm rhs", f, |b| bmm64(&l64, b, 2, 4, 3, 5, trans), &other);
    }
}

fn softmax64(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let row: Vec<f64> = (0..len).map(|j| x[(o * len + j) * inner + i]).collect();
            for (j, v) in oracle::softmax(&row).into_iter().enumerate() {
                out[(o * len + j) * inner + i] = v;
            }
        }
    }
    out
}

#[test]
fn softmax_jvp() {
    let x = unit(&[2, 3, 4], 7);
    for axis in [0, 1, 2] {
        check_ref(
            "softmax",
            |g, v| g.softmax(v, axis),
            |p| softmax64(p, &[2, 3, 4], axis),
            &x,
        );
    }
}

#[test]
fn layer_norm_gradients() {
    let (gamma, beta) = (unit(&[6], 8), unit(&[6], 9));
    let x = unit(&[3, 6], 10);
    let ln = |x: &[f64], ga: &[f64]| {
        let a = oracle::Arr::new(vec![3, 6], x.to_vec());
        let g = oracle::Arr::new(vec![6], ga.to_vec());
        oracle::layer_norm(&a, &g, &arr(&beta), 1e-5).data
    };
    let f = |g: &mut Graph, x: Var| {
        let ga = g.constant(gamma.clone())?;
        let be = g.constant(beta.clone())?;
        g.layer_norm(x, ga, be, 1e-5)
    };
    check_ref("layer_norm x", f, |p| ln(p, &f64s(&gamma)), &x);
    let f = |g: &mut Graph, ga: Var| {
        let xv = g.constant(x.clone())?;
        let be = g.constant(beta.clone())?;
        g.layer_norm(xv, ga, be, 1e-5)
    };
    check_ref("layer_norm gamma", f, |p| ln(&f64s(&x), p), &gamma);
    let f = |g: &mut Graph, be: Var| {
        let xv = g.constant(x.clone())?;
        let ga = g.constant(gamma.clone())?;
        g.layer_norm(xv, ga, be, 1e-5)
    };
    let lnb = |b: &[f64]| {
        oracle::layer_norm(
            &arr(&x),
            &arr(&gamma),
            &oracle::Arr::new(vec![6], b.to_vec()),
            1e-5,
        )
        .data
    };
    check_ref("layer_norm beta", f, lnb, &beta);
}

#[test]
fn conv_gradients() {
    let w = unit(&[3, 3, 3, 2], 11);
    let b = unit(&[2], 12);
    let x = unit(&[2, 4, 5, 3], 13);
    let conv = |x: &[f64], w_: &[f64], b_: &[f64]| {
        oracle::conv2d_same(
            &oracle::Arr::new(vec![2, 4, 5, 3], x.to_vec()),
            &oracle::Arr::new(vec![3, 3, 3, 2], w_.to_vec()),
            &oracle::Arr::new(vec![2], b_.to_vec()),
        )
        .data
    };
    let f = |g: &mut Graph, xv: Var| {
        let wv = g.constant(w.clone())?;
        let bv = g.constant(b.clone())?;
        g.conv2d_same(xv, wv, bv)
    };
    check_ref("conv x", f, |p| conv(p, &f64s(&w), &f64s(&b)), &x);
    let f = |g: &mut Graph, wv: Var| {
        let xv = g.constant(x.clone())?;
        let bv = g.constant(b.clone())?;
        g.conv2d_same(xv, wv, bv)
    };
    check_ref("conv w", f, |p| conv(&f64s(&x), p, &f64s(&b)), &w);
    let f = |g: &mut Graph, bv: Var| {
        let xv = g.constant(x.clone())?;
        let wv = g.constant(w.clone())?;
        g.conv2d_same(xv, wv, bv)
    };
    check_ref("conv bias", f, |p| conv(&f64s(&x), &f64s(&w), p), &b);
}

#[test]
fn elementwise_and_shape_op_gradients() {
    let x = unit(&[2, 3, 4], 14);
    check_ref(
        "gelu",
        |g, v| g.gelu(v),
        |p| p.iter().map(|&v| oracle::gelu(v)).collect(),
        &x,
    );
    check_ref(
        "scale",
        |g, v| g.scale(v, 0.7),
        |p| p.iter().map(|v| v * 0.7f32 as f64).collect(),
        &x,
    );
    check_ref(
        "sin",
        |g, v| g.sin(v),
        |p| p.iter().map(|v| v.sin()).collect(),
        &x,
    );
    let permute = |p: &[f64]| {
        // out[k, i, j] = x[i, j, k]
        let mut out = vec![0.0; 24];
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    out[(k * 2 + i) * 3 + j] = p[(i * 3 + j) * 4 + k];
                }
            }
        }
        out
    };
    check_ref("permute", |g, v| g.permute(v, &[2, 0, 1]), permute, &x);
    let mean = |p: &[f64]| {
        let mut out = vec![0.0; 8];
        for i in 0..2 {
            for k in 0..4 {
                out[i * 4 + k] = (0..3).map(|j| p[(i * 3 + j) * 4 + k]).sum::<f64>() / 3.0;
            }
        }
        out
    };
    check_ref("mean_axis", |g, v| g.mean_axis(v, 1), mean, &x);
    let pad = |p: &[f64]| {
        p.chunks(4)
            .flat_map(|r| r.iter().copied().chain([0.0, 0.0]))
            .collect()
    };
    check_ref("pad_last", |g, v| g.pad_last(v, 2), pad, &x);
    let slice = |p: &[f64]| p.chunks(4).flat_map(|r| r[1..3].to_vec()).collect();
    check_ref("slice_last", |g, v| g.slice_last(v, 1, 2), slice, &x);
    let other = unit(&[2, 3, 4], 15);
    let o64 = f64s(&other);
    let f = |g: &mut Graph, v: Var| {
        let o = g.constant(other.clone())?;
        g.mul(v, o)
    };
    check_ref(
        "mul",
        f,
        |p| p.iter().zip(&o64).map(|(a, b)| a * b).collect(),
        &x,
    );
    let row = unit(&[3, 4], 16);
    let x64 = f64s(&x);
    let f = |g: &mut Graph, r: Var| {
        let xv = g.constant(x.clone())?;
        g.add_broadcast(xv, r)
    };
    check_ref(
        "add_broadcast",
        f,
        |r| x64.iter().enumerate().map(|(i, v)| v + r[i % 12]).collect(),
        &row,
    );
}

/// `[H, N, N(+1)]` from a `[H, 2h−1, 2w−1]` table; the pad column is the
/// largest entry whose offset leaves the grid.
fn rel_bias64(t: &[f64], heads: usize, h: usize, w: usize, pad: bool) -> Vec<f64> {
    let (rh, rw, n) = (2 * h - 1, 2 * w - 1, h * w);
    let keys = n + usize::from(pad);
    let mut out = Vec::with_capacity(heads * n * keys);
    for hd in 0..heads {
        let at = |dy: isize, dx: isize| {
            t[(hd * rh + (dy + h as isize - 1) as usize) * rw + (dx + w as isize - 1) as usize]
        };
        for q in 0..n {
            let (qr, qc) = ((q / w) as isize, (q % w) as isize);
            for k in 0..n {
                out.push(at((k / w) as isize - qr, (k % w) as isize - qc));
            }
            if pad {
                let mut off = Vec::new();
                for dy in -(h as isize - 1)..h as isize {
                    for dx in -(w as isize - 1)..w as isize {
                        let (r, c) = (qr + dy, qc + dx);
                        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                            off.push(at(dy, dx));
                        }
                    }
                }
                out.push(off.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
            }
        }
    }
    out
}

#[test]
fn relative_bias_and_cross_entropy_gradients() {
    for pad in [false, true] {
        let table = unit(&[2, 5, 3], 17);
        check_ref(
            "relative_bias",
            |g, t| g.relative_bias(t, 3, 2, pad),
            |p| rel_bias64(p, 2, 3, 2, pad),
            &table,
        );
    }
    let logits = unit(&[4, 5], 18);
    let ce = |p: &[f64]| {
        vec![oracle::cross_entropy(
            &oracle::Arr::new(vec![4, 5], p.to_vec()),
            &[0, 3, 4, 1],
            0.1,
        )]
    };
    check_ref(
        "cross_entropy",
        |g, l| g.cross_entropy(l, &[0, 3, 4, 1], 0.1),
        ce,
        &logits,
    );
}

#[test]
fn two_paths_accumulate_linearly() {
    let x = unit(&[3, 3], 19);
    let w = unit(&[3, 3], 20);
    let grad = |paths: u8| {
        let mut g = Graph::new();
        let xv = g.leaf(&x.clone().with_requires_grad(true)).unwrap();
        let wv = g.constant(w.clone()).unwrap();
        let a = g.matmul(xv, wv).unwrap();
        let b = g.sin(xv).unwrap();
        let y = match paths {
            1 => a,
            2 => b,
            _ => g.add(a, b).unwrap(),
        };
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        g.grad(xv).unwrap()
    };
    let (ga, gb, both) = (grad(1), grad(2), grad(3));
    for i in 0..9 {
        assert!((both.data()[i] - ga.data()[i] - gb.data()[i]).abs() < 1e-6);
    }
}

/// Tape gradient (f32) of `Σ wᵢ·outᵢ` for a block, against central
/// differences of the f64 reference block.
fn check_block(block: &HybridBlock, grid: GridShape, entries: usize, seed: u64) -> f64 {
    let d = block.dim();
    let z = Tensor::randn(vec![2, grid.height, grid.width, d], 1.0, &mut rng(seed));
    let w = Tensor::randn(z.shape().to_vec(), 1.0, &mut rng(seed + 1));
    let mut g = Graph::new();
    let zv = g.constant(z.clone()).unwrap();
    let out = block.forward(&mut g, "blocks.0", zv).unwrap();
    let wv = g.constant(w.clone()).unwrap();
    let p = g.mul(out.out, wv).unwrap();
    let s = g.sum(p).unwrap();
    g.backward(s).unwrap();

    let cfg = block_config(block);
    let z64 = arr::<f64>(&z);
    let w64 = arr::<f64>(&w);
    let loss = |q: &oracle::ParamMap<f64>| {
        let (_, y) = oracle::block(&z64, q, 0, &cfg);
        y.data
            .iter()
            .zip(&w64.data)
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };
    let params = params_of::<f64>(block, "blocks.0");
    let mut names = Vec::new();
    block.visit("blocks.0", &mut |n, t| {
        if t.requires_grad() {
            for i in 0..t.numel() {
                names.push((n.to_string(), i));
            }
        }
    });
    let mut r = rng(seed + 2);
    let mut worst: f64 = 0.0;
    for k in sample(&mut r, names.len(), entries.min(names.len())) {
        let (name, i) = &names[k];
        let a = g.param_grad(name).unwrap().unwrap().data()[*i] as f64;
        let n = oracle::central_diff(loss, &params, name, *i, 1e-3);
        worst = worst.max(rel_err(a, n));
    }
    worst
}

#[test]
fn block_gradients_match_reference() {
    let mut r = rng(21);
    let grid = GridShape::new(4, 4);
    let conv = HybridBlock::conv(6, 3, 4, &mut r).unwrap();
    let mut attn = AttnMixer::random(6, 9, 6, grid, true, &mut r).unwrap();
    for t in [&mut attn.w_q, &mut attn.w_k] {
        *t = Tensor::randn(t.shape().to_vec(), 0.3, &mut r).with_requires_grad(true);
    }
    attn.rel_bias =
        Tensor::randn(attn.rel_bias.shape().to_vec(), 0.5, &mut r).with_requires_grad(true);
    let sa = HybridBlock::attention(attn, 4, &mut r);
    for b in [conv, sa] {
        let e = check_block(&b, grid, 60, 22);
        assert!(e < 1e-3, "{:?}: {e}", b.mode);
    }
}

#[test]
fn tiny_model_gradients_match_reference() {
    let cfg = ModelConfig {
        image_height: 8,
        image_width: 8,
        patch: 2,
        dim: 8,
        depth: 2,
        classes: 5,
        ..ModelConfig::default()
    };
    for modes in [
        [MixerMode::Conv, MixerMode::SelfAttention],
        [MixerMode::SelfAttention, MixerMode::Conv],
    ] {
        let mut m = Model::new(cfg.clone(), &modes, &mut rng(23)).unwrap();
        let mut r = rng(24);
        m.visit_mut("", &mut |_, t| {
            let n = Tensor::randn(t.shape().to_vec(), 0.1, &mut r);
            for (v, e) in t.data_mut().iter_mut().zip(n.data()) {
                *v += e;
            }
        });
        let img = Tensor::uniform(vec![3, 8, 8, 3], 0.0, 1.0, &mut rng(25));
        let targets = [1usize, 4, 0];
        let mut g = Graph::new();
        let x = g.constant(img.clone()).unwrap();
        let out = m.forward(&mut g, x).unwrap();
        let loss = g.cross_entropy(out.logits, &targets, 0.1).unwrap();
        g.backward(loss).unwrap();

        let rc = ref_config(&m);
        let img64 = arr::<f64>(&img);
        let f = |q: &oracle::ParamMap<f64>| {
            oracle::cross_entropy(&oracle::model(&img64, q, &rc).logits, &targets, 0.1)
        };
        let params = params_of::<f64>(&m, "");
        let mut names = Vec::new();
        m.visit("", &mut |n, t| {
            for i in 0..t.numel() {
                names.push((n.to_string(), i));
            }
        });
        let mut worst: f64 = 0.0;
        for k in sample(&mut rng(26), names.len(), 120) {
            let (name, i) = &names[k];
            let a = g.param_grad(name).unwrap().unwrap().data()[*i] as f64;
            let n = oracle::central_diff(f, &params, name, *i, 1e-3);
            worst = worst.max(rel_err(a, n));
        }
        assert!(worst < 1e-3, "{modes:?}: {worst}");
    }
}
