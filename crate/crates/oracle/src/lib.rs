//! Naive straight-line evaluation of the hybrid model, written with plain
//! index loops and no tape. Generic over the float type so the same code
//! serves as an `f32` reference and as an `f64` finite-difference target.
//!
//! Parameters are looked up by the same dotted names the main crate uses.

#![allow(clippy::needless_range_loop)]

use std::collections::BTreeMap;

use num_traits::Float;

#[derive(Clone, Debug, PartialEq)]
pub struct Arr<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Float> Arr<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "extent/data mismatch"
        );
        Self { shape, data }
    }

    pub fn from_f32(shape: &[usize], data: &[f32]) -> Self {
        Self::new(
            shape.to_vec(),
            data.iter().map(|&v| F::from(v).unwrap()).collect(),
        )
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![F::zero(); n])
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|v| v.to_f32().unwrap()).collect()
    }
}

pub type ParamMap<F> = BTreeMap<String, Arr<F>>;

fn p<'a, F>(params: &'a ParamMap<F>, name: &str) -> &'a Arr<F> {
    params
        .get(name)
        .unwrap_or_else(|| panic!("oracle: missing parameter {name}"))
}

fn c<F: Float>(v: f64) -> F {
    F::from(v).unwrap()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Conv,
    Attn,
}

#[derive(Clone, Debug)]
pub struct RefConfig {
    pub patch: usize,
    pub in_channels: usize,
    pub dim: usize,
    pub kernel: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
    pub classes: usize,
    pub head_norm: bool,
    pub abs_pos: bool,
    pub pad_token: bool,
    pub eps: f64,
    pub modes: Vec<Mode>,
}

/// `out[b,r,c,o] = Σ_{ky,kx,i} x[b, r+ky−K/2, c+kx−K/2, i]·w[ky,kx,i,o] + bias[o]`,
/// zero outside the grid.
pub fn conv2d_same<F: Float>(x: &Arr<F>, w: &Arr<F>, bias: &Arr<F>) -> Arr<F> {
    let (b, h, wd, din) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (k, dout) = (w.shape[0], w.shape[3]);
    let r = (k / 2) as isize;
    let mut out = Arr::zeros(vec![b, h, wd, dout]);
    for bi in 0..b {
        for row in 0..h {
            for col in 0..wd {
                for o in 0..dout {
                    let mut s = F::zero();
                    for ky in 0..k {
                        for kx in 0..k {
                            let (yr, yc) = (
                                row as isize + ky as isize - r,
                                col as isize + kx as isize - r,
                            );
                            if yr < 0 || yc < 0 || yr >= h as isize || yc >= wd as isize {
                                continue;
                            }
                            for i in 0..din {
                                let xv =
                                    x.data[((bi * h + yr as usize) * wd + yc as usize) * din + i];
                                let wv = w.data[((ky * k + kx) * din + i) * dout + o];
                                s = s + xv * wv;
                            }
                        }
                    }
                    out.data[((bi * h + row) * wd + col) * dout + o] = s + bias.data[o];
                }
            }
        }
    }
    out
}

pub fn layer_norm<F: Float>(x: &Arr<F>, gamma: &Arr<F>, beta: &Arr<F>, eps: f64) -> Arr<F> {
    let d = *x.shape.last().unwrap();
    let mut out = x.clone();
    for (ri, row) in x.data.chunks(d).enumerate() {
        let n: F = c(d as f64);
        let mean = row.iter().fold(F::zero(), |a, &v| a + v) / n;
        let var = row
            .iter()
            .fold(F::zero(), |a, &v| a + (v - mean) * (v - mean))
            / n;
        let rs = F::one() / (var + c(eps)).sqrt();
        for j in 0..d {
            out.data[ri * d + j] = (row[j] - mean) * rs * gamma.data[j] + beta.data[j];
        }
    }
    out
}

pub fn gelu<F: Float>(x: F) -> F {
    let k: F = c((2.0 / std::f64::consts::PI).sqrt());
    c::<F>(0.5) * x * (F::one() + (k * (x + c::<F>(0.044715) * x * x * x)).tanh())
}

/// `x[rows, k]·w[k, n] + b[n]`.
pub fn affine<F: Float>(x: &[F], rows: usize, w: &Arr<F>, b: &Arr<F>) -> Vec<F> {
    let (k, n) = (w.shape[0], w.shape[1]);
    let mut out = vec![F::zero(); rows * n];
    for r in 0..rows {
        for j in 0..n {
            let mut s = F::zero();
            for i in 0..k {
                s = s + x[r * k + i] * w.data[i * n + j];
            }
            out[r * n + j] = s + b.data[j];
        }
    }
    out
}

pub fn softmax<F: Float>(row: &[F]) -> Vec<F> {
    let m = row.iter().fold(F::neg_infinity(), |a, &v| a.max(v));
    let e: Vec<F> = row.iter().map(|&v| (v - m).exp()).collect();
    let s = e.iter().fold(F::zero(), |a, &v| a + v);
    e.into_iter().map(|v| v / s).collect()
}

/// Attention weights of one head for every query of one sample:
/// `[N][N(+1)]`, pad key last.
pub fn attention_rows<F: Float>(
    x: &[F],
    h: usize,
    w: usize,
    params: &ParamMap<F>,
    prefix: &str,
    head: usize,
    cfg: &RefConfig,
) -> Vec<Vec<F>> {
    let (d, dh, heads) = (cfg.dim, cfg.head_dim, cfg.heads);
    let n = h * w;
    let wq = p(params, &format!("{prefix}.w_q"));
    let wk = p(params, &format!("{prefix}.w_k"));
    let rel = p(params, &format!("{prefix}.rel_bias"));
    let (rh, rw) = (2 * h - 1, 2 * w - 1);
    let proj = |m: &Arr<F>, t: usize, j: usize| {
        let mut s = F::zero();
        for i in 0..d {
            s = s + x[t * d + i] * m.data[i * heads * dh + head * dh + j];
        }
        s
    };
    let q: Vec<Vec<F>> = (0..n)
        .map(|t| (0..dh).map(|j| proj(wq, t, j)).collect())
        .collect();
    let k: Vec<Vec<F>> = (0..n)
        .map(|t| (0..dh).map(|j| proj(wk, t, j)).collect())
        .collect();
    let scale = F::one() / c::<F>(d as f64).sqrt();
    let table = |dy: isize, dx: isize| {
        rel.data[(head * rh + (dy + h as isize - 1) as usize) * rw + (dx + w as isize - 1) as usize]
    };
    let mut rows = Vec::with_capacity(n);
    for qi in 0..n {
        let (qr, qc) = ((qi / w) as isize, (qi % w) as isize);
        let mut logits = Vec::with_capacity(n + 1);
        for ki in 0..n {
            let (kr, kc) = ((ki / w) as isize, (ki % w) as isize);
            let dot = (0..dh).fold(F::zero(), |a, j| a + q[qi][j] * k[ki][j]);
            logits.push(dot * scale + table(kr - qr, kc - qc));
        }
        if cfg.pad_token {
            // largest table entry over offsets that land off the grid
            let mut off = Vec::new();
            for dy in -(h as isize - 1)..=(h as isize - 1) {
                for dx in -(w as isize - 1)..=(w as isize - 1) {
                    let (r, cc) = (qr + dy, qc + dx);
                    if r < 0 || cc < 0 || r >= h as isize || cc >= w as isize {
                        off.push(table(dy, dx));
                    }
                }
            }
            let pad = if off.is_empty() {
                c(-1e30)
            } else {
                off.iter().fold(F::neg_infinity(), |a, &v| a.max(v))
            };
            logits.push(pad);
        }
        rows.push(softmax(&logits));
    }
    rows
}

/// Multi-head attention mixer on `x: [B, h, w, d]`.
pub fn mhsa<F: Float>(x: &Arr<F>, params: &ParamMap<F>, prefix: &str, cfg: &RefConfig) -> Arr<F> {
    let (b, h, w, d) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (dh, heads, n) = (cfg.head_dim, cfg.heads, h * w);
    let wv = p(params, &format!("{prefix}.w_v"));
    let wo = p(params, &format!("{prefix}.w_o"));
    let bias = p(params, &format!("{prefix}.bias"));
    let mut out = Arr::zeros(x.shape.clone());
    for bi in 0..b {
        let xs = &x.data[bi * n * d..(bi + 1) * n * d];
        for o in out.data[bi * n * d..(bi + 1) * n * d].chunks_mut(d) {
            o.copy_from_slice(&bias.data);
        }
        for head in 0..heads {
            let a = attention_rows(xs, h, w, params, prefix, head, cfg);
            let v: Vec<Vec<F>> = (0..n)
                .map(|t| {
                    (0..dh)
                        .map(|j| {
                            (0..d).fold(F::zero(), |s, i| {
                                s + xs[t * d + i] * wv.data[i * heads * dh + head * dh + j]
                            })
                        })
                        .collect()
                })
                .collect();
            for qi in 0..n {
                // pad key has a zero value vector
                let ctx: Vec<F> = (0..dh)
                    .map(|j| (0..n).fold(F::zero(), |s, ki| s + a[qi][ki] * v[ki][j]))
                    .collect();
                for e in 0..d {
                    let mut s = F::zero();
                    for j in 0..dh {
                        s = s + ctx[j] * wo.data[(head * dh + j) * d + e];
                    }
                    let slot = &mut out.data[(bi * n + qi) * d + e];
                    *slot = *slot + s;
                }
            }
        }
    }
    out
}

fn add<F: Float>(a: &Arr<F>, b: &Arr<F>) -> Arr<F> {
    Arr::new(
        a.shape.clone(),
        a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect(),
    )
}

/// Returns `(mixer output, block output)`.
pub fn block<F: Float>(
    z: &Arr<F>,
    params: &ParamMap<F>,
    i: usize,
    cfg: &RefConfig,
) -> (Arr<F>, Arr<F>) {
    let pre = format!("blocks.{i}");
    let h = layer_norm(
        z,
        p(params, &format!("{pre}.ln1.gamma")),
        p(params, &format!("{pre}.ln1.beta")),
        cfg.eps,
    );
    let mixer = match cfg.modes[i] {
        Mode::Conv => conv2d_same(
            &h,
            p(params, &format!("{pre}.conv.weight")),
            p(params, &format!("{pre}.conv.bias")),
        ),
        Mode::Attn => mhsa(&h, params, &format!("{pre}.attn"), cfg),
    };
    let mid = add(&mixer, z);
    let h = layer_norm(
        &mid,
        p(params, &format!("{pre}.ln2.gamma")),
        p(params, &format!("{pre}.ln2.beta")),
        cfg.eps,
    );
    let rows = h.data.len() / cfg.dim;
    let a = affine(
        &h.data,
        rows,
        p(params, &format!("{pre}.mlp.fc1.weight")),
        p(params, &format!("{pre}.mlp.fc1.bias")),
    );
    let a: Vec<F> = a.into_iter().map(gelu).collect();
    let m = affine(
        &a,
        rows,
        p(params, &format!("{pre}.mlp.fc2.weight")),
        p(params, &format!("{pre}.mlp.fc2.bias")),
    );
    let out = add(&Arr::new(mid.shape.clone(), m), &mid);
    (mixer, out)
}

/// `images: [B, H, W, C]` to tokens `[B, H/P, W/P, d]`; each patch is read in
/// `(row, col, channel)` order.
pub fn patch_embed<F: Float>(images: &Arr<F>, params: &ParamMap<F>, cfg: &RefConfig) -> Arr<F> {
    let (b, ih, iw, ch) = (
        images.shape[0],
        images.shape[1],
        images.shape[2],
        images.shape[3],
    );
    let pz = cfg.patch;
    let (h, w) = (ih / pz, iw / pz);
    let mut flat = Vec::with_capacity(b * h * w * pz * pz * ch);
    for bi in 0..b {
        for pr in 0..h {
            for pc in 0..w {
                for y in 0..pz {
                    for x in 0..pz {
                        for k in 0..ch {
                            flat.push(
                                images.data[((bi * ih + pr * pz + y) * iw + pc * pz + x) * ch + k],
                            );
                        }
                    }
                }
            }
        }
    }
    let mut tok = affine(
        &flat,
        b * h * w,
        p(params, "patch_embed.proj.weight"),
        p(params, "patch_embed.proj.bias"),
    );
    if cfg.abs_pos {
        let pos = p(params, "patch_embed.pos");
        let per = h * w * cfg.dim;
        for (i, v) in tok.iter_mut().enumerate() {
            *v = *v + pos.data[i % per];
        }
    }
    Arr::new(vec![b, h, w, cfg.dim], tok)
}

pub struct RefOutputs<F> {
    pub embed: Arr<F>,
    pub mixers: Vec<Arr<F>>,
    pub blocks: Vec<Arr<F>>,
    pub logits: Arr<F>,
}

pub fn model<F: Float>(images: &Arr<F>, params: &ParamMap<F>, cfg: &RefConfig) -> RefOutputs<F> {
    let embed = patch_embed(images, params, cfg);
    let mut z = embed.clone();
    let (mut mixers, mut blocks) = (Vec::new(), Vec::new());
    for i in 0..cfg.modes.len() {
        let (m, out) = block(&z, params, i, cfg);
        mixers.push(m);
        blocks.push(out.clone());
        z = out;
    }
    let zn = if cfg.head_norm {
        layer_norm(
            &z,
            p(params, "head.norm.gamma"),
            p(params, "head.norm.beta"),
            cfg.eps,
        )
    } else {
        z
    };
    let (b, n, d) = (zn.shape[0], zn.shape[1] * zn.shape[2], cfg.dim);
    let mut pooled = vec![F::zero(); b * d];
    for bi in 0..b {
        for t in 0..n {
            for e in 0..d {
                pooled[bi * d + e] = pooled[bi * d + e] + zn.data[(bi * n + t) * d + e];
            }
        }
    }
    let nn: F = c(n as f64);
    for v in pooled.iter_mut() {
        *v = *v / nn;
    }
    let logits = affine(
        &pooled,
        b,
        p(params, "head.linear.weight"),
        p(params, "head.linear.bias"),
    );
    RefOutputs {
        embed,
        mixers,
        blocks,
        logits: Arr::new(vec![b, cfg.classes], logits),
    }
}

/// Mean cross-entropy against `(1 − ε)·onehot + ε/C`.
pub fn cross_entropy<F: Float>(logits: &Arr<F>, targets: &[usize], smoothing: f64) -> F {
    let cls = logits.shape[1];
    let eps: F = c(smoothing);
    let mut total = F::zero();
    for (i, &y) in targets.iter().enumerate() {
        let row = &logits.data[i * cls..(i + 1) * cls];
        let m = row.iter().fold(F::neg_infinity(), |a, &v| a.max(v));
        let lse = m + row.iter().fold(F::zero(), |a, &v| a + (v - m).exp()).ln();
        let mean = row.iter().fold(F::zero(), |a, &v| a + v) / c(cls as f64);
        total = total + (F::one() - eps) * (lse - row[y]) + eps * (lse - mean);
    }
    total / c(targets.len() as f64)
}

/// Central difference of `f` in parameter entry `name[index]`.
pub fn central_diff(
    f: impl Fn(&ParamMap<f64>) -> f64,
    params: &ParamMap<f64>,
    name: &str,
    index: usize,
    step: f64,
) -> f64 {
    let mut q = params.clone();
    let x0 = q[name].data[index];
    q.get_mut(name).unwrap().data[index] = x0 + step;
    let fp = f(&q);
    q.get_mut(name).unwrap().data[index] = x0 - step;
    let fm = f(&q);
    (fp - fm) / (2.0 * step)
}
