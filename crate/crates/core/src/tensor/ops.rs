//! Forward kernels shared by the tape and by tape-free evaluation.
//!
//! Summation order: matrix products go through `matrixmultiply`'s blocked
//! sgemm; row reductions (softmax, layer norm, means) run left to right over
//! the innermost axis with `f64` accumulators.

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Logit assigned to the pad slot when no out-of-grid offset exists (1×1 grids).
const EMPTY_PAD_LOGIT: f32 = -1.0e30;

/// `c[m×n] = op(a)·op(b) + beta·c`, where `op` optionally transposes a
/// row-major operand. With `trans_a`, `a` is stored `[k×m]`; with `trans_b`,
/// `b` is stored `[n×k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above guarantee every strided access is in bounds.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a[..., m, k] · b[k, n]`; leading axes of `a` are treated as extra rows.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (rows, k, n) = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![0.0; rows * n];
    gemm(rows, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() < 2 || b.len() != 2 {
        return Err(invalid(
            "matmul",
            format!("need rank>=2 lhs and rank-2 rhs, got {a:?} x {b:?}"),
        ));
    }
    let k = *a.last().unwrap();
    if k != b[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            expected: vec![k, b[1]],
            got: b.to_vec(),
        });
    }
    let rows = a[..a.len() - 1].iter().product();
    Ok((rows, k, b[1]))
}

/// Batched product over the leading axis: `[g, m, k] · [g, k, n]`, or
/// `[g, m, k] · [g, n, k]ᵀ` when `trans_b`.
pub fn bmm(a: &Tensor, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let (g, m, k, n) = bmm_dims(a.shape(), b.shape(), trans_b)?;
    let mut out = vec![0.0; g * m * n];
    for i in 0..g {
        gemm(
            m,
            k,
            n,
            &a.data()[i * m * k..(i + 1) * m * k],
            false,
            &b.data()[i * k * n..(i + 1) * k * n],
            trans_b,
            &mut out[i * m * n..(i + 1) * m * n],
            0.0,
        );
    }
    Ok(Tensor::from_parts(vec![g, m, n], out))
}

pub(crate) fn bmm_dims(
    a: &[usize],
    b: &[usize],
    trans_b: bool,
) -> Result<(usize, usize, usize, usize)> {
    if a.len() != 3 || b.len() != 3 || a[0] != b[0] {
        return Err(invalid(
            "bmm",
            format!("need matching rank-3 operands, got {a:?} x {b:?}"),
        ));
    }
    let (g, m, k) = (a[0], a[1], a[2]);
    let (bk, n) = if trans_b { (b[2], b[1]) } else { (b[1], b[2]) };
    if bk != k {
        return Err(Error::ShapeMismatch {
            op: "bmm",
            expected: vec![g, k, n],
            got: b.to_vec(),
        });
    }
    Ok((g, m, k, n))
}

/// `(outer, len, inner)` split of a shape around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(invalid(
            "softmax",
            format!("axis {axis} out of range for rank {}", x.rank()),
        ));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0f32; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let max = (0..len)
                .map(|j| src[base + j * inner])
                .fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f64;
            for j in 0..len {
                let e = (src[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                denom += e as f64;
            }
            let inv = (1.0 / denom) as f32;
            for j in 0..len {
                out[base + j * inner] *= inv;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Softmax vector-Jacobian product: `dx = y ⊙ (dy − Σ dy·y)` along `axis`.
pub(crate) fn softmax_backward(y: &[f32], dy: &[f32], shape: &[usize], axis: usize) -> Vec<f32> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut dx = vec![0.0f32; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let dot: f64 = (0..len)
                .map(|j| (dy[base + j * inner] * y[base + j * inner]) as f64)
                .sum();
            let dot = dot as f32;
            for j in 0..len {
                let p = base + j * inner;
                dx[p] = y[p] * (dy[p] - dot);
            }
        }
    }
    dx
}

pub(crate) struct LayerNormOut {
    pub y: Vec<f32>,
    pub xhat: Vec<f32>,
    pub rstd: Vec<f32>,
}

pub(crate) fn layer_norm_forward(
    x: &[f32],
    d: usize,
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> LayerNormOut {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps as f64).sqrt();
        rstd[r] = rs as f32;
        for j in 0..d {
            let h = ((row[j] as f64 - mean) * rs) as f32;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gamma[j] + beta[j];
        }
    }
    LayerNormOut { y, xhat, rstd }
}

/// Layer norm over the last axis with affine `gamma`, `beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let d = check_layer_norm(x, gamma, beta)?;
    let out = layer_norm_forward(x.data(), d, gamma.data(), beta.data(), eps);
    Ok(Tensor::from_parts(x.shape().to_vec(), out.y))
}

pub(crate) fn check_layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<usize> {
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| invalid("layer_norm", "rank-0 input"))?;
    for p in [gamma, beta] {
        if p.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                expected: vec![d],
                got: p.shape().to_vec(),
            });
        }
    }
    Ok(d)
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.batch * self.height * self.width
    }
    pub fn patch(&self) -> usize {
        self.k * self.k * self.c_in
    }
}

pub(crate) fn conv_geom(x: &[usize], kernel: &[usize], bias: &[usize]) -> Result<ConvGeom> {
    if x.len() != 4 || kernel.len() != 4 {
        return Err(invalid(
            "conv2d_same",
            format!("expected x [B,H,W,Cin] and kernel [K,K,Cin,Cout], got {x:?} and {kernel:?}"),
        ));
    }
    let k = kernel[0];
    if k.is_multiple_of(2) {
        return Err(Error::EvenKernel(k));
    }
    if kernel[1] != k || kernel[2] != x[3] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_same",
            expected: vec![k, k, x[3], kernel[3]],
            got: kernel.to_vec(),
        });
    }
    if bias != [kernel[3]] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_same",
            expected: vec![kernel[3]],
            got: bias.to_vec(),
        });
    }
    Ok(ConvGeom {
        batch: x[0],
        height: x[1],
        width: x[2],
        c_in: x[3],
        c_out: kernel[3],
        k,
    })
}

/// Unfolds zero-padded `K×K` neighbourhoods: row `(b, y, x)`, column `(ky, kx, ci)`.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let r = (g.k / 2) as isize;
    let patch = g.patch();
    let mut cols = vec![0.0f32; g.rows() * patch];
    for b in 0..g.batch {
        for y in 0..g.height {
            for xx in 0..g.width {
                let row = ((b * g.height + y) * g.width + xx) * patch;
                for ky in 0..g.k {
                    let sy = y as isize + ky as isize - r;
                    if sy < 0 || sy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let sx = xx as isize + kx as isize - r;
                        if sx < 0 || sx >= g.width as isize {
                            continue;
                        }
                        let src = ((b * g.height + sy as usize) * g.width + sx as usize) * g.c_in;
                        let dst = row + (ky * g.k + kx) * g.c_in;
                        cols[dst..dst + g.c_in].copy_from_slice(&x[src..src + g.c_in]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
pub(crate) fn col2im(cols: &[f32], g: &ConvGeom) -> Vec<f32> {
    let r = (g.k / 2) as isize;
    let patch = g.patch();
    let mut x = vec![0.0f32; g.batch * g.height * g.width * g.c_in];
    for b in 0..g.batch {
        for y in 0..g.height {
            for xx in 0..g.width {
                let row = ((b * g.height + y) * g.width + xx) * patch;
                for ky in 0..g.k {
                    let sy = y as isize + ky as isize - r;
                    if sy < 0 || sy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let sx = xx as isize + kx as isize - r;
                        if sx < 0 || sx >= g.width as isize {
                            continue;
                        }
                        let dst = ((b * g.height + sy as usize) * g.width + sx as usize) * g.c_in;
                        let src = row + (ky * g.k + kx) * g.c_in;
                        for c in 0..g.c_in {
                            x[dst + c] += cols[src + c];
                        }
                    }
                }
            }
        }
    }
    x
}

pub(crate) fn conv_forward(cols: &[f32], kernel: &[f32], bias: &[f32], g: &ConvGeom) -> Vec<f32> {
    let mut out = vec![0.0f32; g.rows() * g.c_out];
    for row in out.chunks_exact_mut(g.c_out) {
        row.copy_from_slice(bias);
    }
    gemm(
        g.rows(),
        g.patch(),
        g.c_out,
        cols,
        false,
        kernel,
        false,
        &mut out,
        1.0,
    );
    out
}

/// Stride-1 convolution with zero padding `⌊K/2⌋` on a `[B, H, W, Cin]` map:
/// `out[p] = Σ_δ x[p+δ]·W_δ + bias`.
pub fn conv2d_same(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let g = conv_geom(x.shape(), kernel.shape(), bias.shape())?;
    let cols = im2col(x.data(), &g);
    let out = conv_forward(&cols, kernel.data(), bias.data(), &g);
    Ok(Tensor::from_parts(
        vec![g.batch, g.height, g.width, g.c_out],
        out,
    ))
}

pub fn permute(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let shape = x.shape();
    let mut seen = vec![false; shape.len()];
    if perm.len() != shape.len()
        || perm
            .iter()
            .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
    {
        return Err(invalid(
            "permute",
            format!("{perm:?} is not a permutation of rank {}", shape.len()),
        ));
    }
    let (out_shape, data) = permute_raw(x.data(), shape, perm);
    Ok(Tensor::from_parts(out_shape, data))
}

pub(crate) fn permute_raw(src: &[f32], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f32>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    if src.is_empty() {
        return (out_shape, out);
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..src.len() {
        out.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Index of the relative offset `(dr, dc)` in a `(2h−1)×(2w−1)` table.
pub(crate) fn rel_index(h: usize, w: usize, dr: isize, dc: isize) -> usize {
    let row = (dr + h as isize - 1) as usize;
    let col = (dc + w as isize - 1) as usize;
    row * (2 * w - 1) + col
}

pub(crate) struct RelBiasOut {
    pub bias: Vec<f32>,
    /// Per `(head, query)`: position of the winning out-of-grid offset.
    pub pad_argmax: Vec<Option<usize>>,
}

/// Expands a relative bias table `[H, 2h−1, 2w−1]` into `[H, N, N(+1)]`.
///
/// Column `k < N` reads the table at offset `key − query`. The optional pad
/// column stands for every out-of-grid offset at once: its logit is the
/// largest table entry over the offsets whose key position leaves the grid.
/// A head whose spike points off the grid therefore puts its spike on the
/// zero pad slot, and every other head sees the pad at the background level.
/// Ties go to the first offset in row-major order.
pub(crate) fn relative_bias_forward(
    table: &[f32],
    heads: usize,
    h: usize,
    w: usize,
    pad: bool,
) -> RelBiasOut {
    let n = h * w;
    let keys = n + usize::from(pad);
    let tsize = (2 * h - 1) * (2 * w - 1);
    let mut bias = vec![0.0f32; heads * n * keys];
    let mut pad_argmax = Vec::new();
    for hd in 0..heads {
        let t = &table[hd * tsize..(hd + 1) * tsize];
        for q in 0..n {
            let (rq, cq) = ((q / w) as isize, (q % w) as isize);
            let row = &mut bias[(hd * n + q) * keys..(hd * n + q + 1) * keys];
            for k in 0..n {
                let (rk, ck) = ((k / w) as isize, (k % w) as isize);
                row[k] = t[rel_index(h, w, rk - rq, ck - cq)];
            }
            if pad {
                let phantoms = phantom_offsets(h, w, rq, cq);
                if phantoms.is_empty() {
                    row[n] = EMPTY_PAD_LOGIT;
                    pad_argmax.push(None);
                    continue;
                }
                let mut best = phantoms[0];
                for &i in &phantoms[1..] {
                    if t[i] > t[best] {
                        best = i;
                    }
                }
                row[n] = t[best];
                pad_argmax.push(Some(best));
            }
        }
    }
    RelBiasOut { bias, pad_argmax }
}

/// Table indices of offsets that take query `(rq, cq)` outside an `h×w` grid.
pub(crate) fn phantom_offsets(h: usize, w: usize, rq: isize, cq: isize) -> Vec<usize> {
    let (hi, wi) = (h as isize, w as isize);
    let mut out = Vec::new();
    for dr in -(hi - 1)..hi {
        for dc in -(wi - 1)..wi {
            let (r, c) = (rq + dr, cq + dc);
            if r < 0 || r >= hi || c < 0 || c >= wi {
                out.push(rel_index(h, w, dr, dc));
            }
        }
    }
    out
}

pub(crate) fn relative_bias_backward(
    dbias: &[f32],
    pad_argmax: &[Option<usize>],
    heads: usize,
    h: usize,
    w: usize,
    pad: bool,
) -> Vec<f32> {
    let n = h * w;
    let keys = n + usize::from(pad);
    let tsize = (2 * h - 1) * (2 * w - 1);
    let mut dt = vec![0.0f32; heads * tsize];
    for hd in 0..heads {
        for q in 0..n {
            let (rq, cq) = ((q / w) as isize, (q % w) as isize);
            let row = &dbias[(hd * n + q) * keys..(hd * n + q + 1) * keys];
            let t = &mut dt[hd * tsize..(hd + 1) * tsize];
            for k in 0..n {
                let (rk, ck) = ((k / w) as isize, (k % w) as isize);
                t[rel_index(h, w, rk - rq, ck - cq)] += row[k];
            }
            if let Some(Some(i)) = pad.then(|| pad_argmax[hd * n + q]) {
                t[i] += row[n];
            }
        }
    }
    dt
}
