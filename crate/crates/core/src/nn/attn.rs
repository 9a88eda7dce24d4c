use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, GridShape, Params, TokenGrid};
use crate::tensor::{Graph, Tensor, Var};

/// Multi-head self-attention with a learned relative position bias.
///
/// Per-head projections are stored side by side: `w_q`, `w_k`, `w_v` are
/// `[d, H·d_H]` with head `h` in columns `h·d_H..(h+1)·d_H`; `w_o` is
/// `[H·d_H, d]` with head `h` in the matching rows, so the concatenated head
/// outputs times `w_o` is `Σ_h SA_h(X)·W^O_h`. Scores are scaled by `1/√d`.
///
/// With `pad_token` set, every query also sees one extra key whose key and
/// value vectors are zero. Its bias is the largest `rel_bias` entry over
/// the offsets that leave the grid from that query.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMixer {
    pub heads: usize,
    pub head_dim: usize,
    pub grid: GridShape,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    /// `[H, 2h_t−1, 2w_t−1]`, indexed by `key − query`.
    pub rel_bias: Tensor,
    pub bias: Tensor,
    pub pad_token: bool,
}

impl AttnMixer {
    /// Normal(0, 0.02²) projections, zero relative bias and output bias.
    pub fn random<R: Rng + ?Sized>(
        dim: usize,
        heads: usize,
        head_dim: usize,
        grid: GridShape,
        pad_token: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let inner = heads * head_dim;
        let (rh, rw) = grid.rel_extent();
        let m = Self {
            heads,
            head_dim,
            grid,
            w_q: Tensor::randn(vec![dim, inner], 0.02, rng),
            w_k: Tensor::randn(vec![dim, inner], 0.02, rng),
            w_v: Tensor::randn(vec![dim, inner], 0.02, rng),
            w_o: Tensor::randn(vec![inner, dim], 0.02, rng),
            rel_bias: Tensor::zeros(vec![heads, rh, rw]),
            bias: Tensor::zeros(vec![dim]),
            pad_token,
        };
        m.validate()?;
        Ok(m.trainable())
    }

    pub(crate) fn trainable(mut self) -> Self {
        self.visit_mut("", &mut |_, t| t.set_requires_grad(true));
        self
    }

    pub fn dim(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn keys(&self) -> usize {
        self.grid.tokens() + usize::from(self.pad_token)
    }

    pub fn validate(&self) -> Result<()> {
        let (d, inner) = (self.dim(), self.heads * self.head_dim);
        let (rh, rw) = self.grid.rel_extent();
        let expect: [(&str, &Tensor, Vec<usize>); 6] = [
            ("w_q", &self.w_q, vec![d, inner]),
            ("w_k", &self.w_k, vec![d, inner]),
            ("w_v", &self.w_v, vec![d, inner]),
            ("w_o", &self.w_o, vec![inner, d]),
            ("rel_bias", &self.rel_bias, vec![self.heads, rh, rw]),
            ("bias", &self.bias, vec![d]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::InvalidArgument {
                    op: "attn_mixer",
                    msg: format!("{name} has shape {:?}, expected {shape:?}", t.shape()),
                });
            }
        }
        Ok(())
    }

    /// `d_H = d` and `N_H = K²`: the shape a `K×K` convolution maps onto.
    pub fn check_reparameterizable(&self, kernel: usize) -> Result<()> {
        if self.head_dim != self.dim() || self.heads != kernel * kernel {
            return Err(Error::InvalidArgument {
                op: "attn_mixer",
                msg: format!(
                    "need head_dim == dim ({}) and heads == K^2 ({}), got head_dim {} and {} heads",
                    self.dim(),
                    kernel * kernel,
                    self.head_dim,
                    self.heads
                ),
            });
        }
        Ok(())
    }

    fn head_cols(t: &Tensor, head: usize, dh: usize) -> Tensor {
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(rows * dh);
        for r in 0..rows {
            out.extend_from_slice(&t.data()[r * cols + head * dh..r * cols + (head + 1) * dh]);
        }
        Tensor::from_parts(vec![rows, dh], out)
    }

    pub fn w_q_head(&self, head: usize) -> Tensor {
        Self::head_cols(&self.w_q, head, self.head_dim)
    }

    pub fn w_k_head(&self, head: usize) -> Tensor {
        Self::head_cols(&self.w_k, head, self.head_dim)
    }

    pub fn w_v_head(&self, head: usize) -> Tensor {
        Self::head_cols(&self.w_v, head, self.head_dim)
    }

    /// `W^O_h`, shape `[d_H, d]`.
    pub fn w_o_head(&self, head: usize) -> Tensor {
        let (dh, d) = (self.head_dim, self.dim());
        Tensor::from_parts(
            vec![dh, d],
            self.w_o.data()[head * dh * d..(head + 1) * dh * d].to_vec(),
        )
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4
            || shape[1] != self.grid.height
            || shape[2] != self.grid.width
            || shape[3] != self.dim()
        {
            return Err(Error::Geometry(format!(
                "attention built for a {}x{} grid of dim {} got input {shape:?}",
                self.grid.height,
                self.grid.width,
                self.dim()
            )));
        }
        Ok(())
    }

    /// Splits `[B·N, d]·W` into per-head `[B·H, N, d_H]`.
    fn project(&self, g: &mut Graph, x2: Var, w: Var, batch: usize) -> Result<Var> {
        let (n, h, dh) = (self.grid.tokens(), self.heads, self.head_dim);
        let p = g.matmul(x2, w)?;
        let p = g.reshape(p, &[batch, n, h, dh])?;
        let p = g.permute(p, &[0, 2, 1, 3])?;
        g.reshape(p, &[batch * h, n, dh])
    }

    /// Attention weights `[B, H, N, N_keys]` (pad column last when enabled).
    fn scores(&self, g: &mut Graph, prefix: &str, x: Var) -> Result<(Var, Var, usize)> {
        self.check_input(g.shape(x))?;
        let (b, d, n) = (g.shape(x)[0], self.dim(), self.grid.tokens());
        let wq = g.param(&join(prefix, "w_q"), &self.w_q)?;
        let wk = g.param(&join(prefix, "w_k"), &self.w_k)?;
        let rel = g.param(&join(prefix, "rel_bias"), &self.rel_bias)?;
        let x2 = g.reshape(x, &[b * n, d])?;
        let q = self.project(g, x2, wq, b)?;
        let k = self.project(g, x2, wk, b)?;
        let s = g.bmm(q, k, true)?;
        let s = g.scale(s, 1.0 / (d as f32).sqrt())?;
        let mut s = g.reshape(s, &[b, self.heads, n, n])?;
        if self.pad_token {
            s = g.pad_last(s, 1)?;
        }
        let bias = g.relative_bias(rel, self.grid.height, self.grid.width, self.pad_token)?;
        let s = g.add_broadcast(s, bias)?;
        let a = g.softmax(s, 3)?;
        Ok((a, x2, b))
    }

    pub fn forward(&self, g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
        let (a, x2, b) = self.scores(g, prefix, x)?;
        let (d, n, h, dh) = (self.dim(), self.grid.tokens(), self.heads, self.head_dim);
        let wv = g.param(&join(prefix, "w_v"), &self.w_v)?;
        let wo = g.param(&join(prefix, "w_o"), &self.w_o)?;
        let bo = g.param(&join(prefix, "bias"), &self.bias)?;
        // the pad value vector is zero, so its column drops out of A·V
        let a = if self.pad_token {
            g.slice_last(a, 0, n)?
        } else {
            a
        };
        let a = g.reshape(a, &[b * h, n, n])?;
        let v = self.project(g, x2, wv, b)?;
        let o = g.bmm(a, v, false)?;
        let o = g.reshape(o, &[b, h, n, dh])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[b * n, h * dh])?;
        let y = g.matmul(o, wo)?;
        let y = g.add_broadcast(y, bo)?;
        g.reshape(y, &[b, self.grid.height, self.grid.width, d])
    }
}

impl Params for AttnMixer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "w_q"), &self.w_q);
        f(&join(prefix, "w_k"), &self.w_k);
        f(&join(prefix, "w_v"), &self.w_v);
        f(&join(prefix, "w_o"), &self.w_o);
        f(&join(prefix, "rel_bias"), &self.rel_bias);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "w_q"), &mut self.w_q);
        f(&join(prefix, "w_k"), &mut self.w_k);
        f(&join(prefix, "w_v"), &mut self.w_v);
        f(&join(prefix, "w_o"), &mut self.w_o);
        f(&join(prefix, "rel_bias"), &mut self.rel_bias);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Softmax attention of one head over a batch: `[B, N, N_keys]`.
pub fn attention_scores(x: &TokenGrid, head: usize, a: &AttnMixer) -> Result<Tensor> {
    if head >= a.heads {
        return Err(Error::InvalidArgument {
            op: "attention_scores",
            msg: format!("head {head} of {}", a.heads),
        });
    }
    let mut g = Graph::new();
    let xv = g.constant(x.tensor().clone())?;
    let (s, _, b) = a.scores(&mut g, "attn", xv)?;
    let all = g.value(s);
    let (n, keys) = (a.grid.tokens(), a.keys());
    let mut out = Vec::with_capacity(b * n * keys);
    for bi in 0..b {
        let o = all.offset(&[bi, head, 0, 0]);
        out.extend_from_slice(&all.data()[o..o + n * keys]);
    }
    Ok(Tensor::from_parts(vec![b, n, keys], out))
}

pub fn mhsa_forward(x: &TokenGrid, a: &AttnMixer) -> Result<TokenGrid> {
    let mut g = Graph::new();
    let xv = g.constant(x.tensor().clone())?;
    let y = a.forward(&mut g, "attn", xv)?;
    TokenGrid::new(g.value(y).clone())
}
