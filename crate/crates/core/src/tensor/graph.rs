use std::collections::HashMap;

use crate::error::{invalid, Error, Result};
use crate::tensor::ops::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBroadcast {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f32,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Gelu {
        a: Var,
    },
    Relu {
        a: Var,
    },
    Sin {
        a: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f32>,
    },
    MeanAxis {
        a: Var,
        axis: usize,
    },
    Sum {
        a: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        smoothing: f32,
        probs: Vec<f32>,
    },
    RelativeBias {
        table: Var,
        heads: usize,
        h: usize,
        w: usize,
        pad: bool,
        pad_argmax: Vec<Option<usize>>,
    },
    PadLast {
        a: Var,
        extra: usize,
    },
    SliceLast {
        a: Var,
        start: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Tape of executed coarse ops. Nodes are appended in execution order, so
/// every operand precedes its result. One backward pass per recording.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
    grads: Option<Vec<Option<Vec<f32>>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        value: Tensor,
        requires_grad: bool,
        op: Op,
        name: &'static str,
    ) -> Result<Var> {
        if self.grads.is_some() {
            return Err(Error::GraphConsumed);
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let value = Tensor::from_parts(value.shape().to_vec(), value.into_data());
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// `v` in f64: a `sum` node is re-reduced from its operand instead of
    /// read back from its rounded f32 result.
    pub fn scalar_f64(&self, v: Var) -> f64 {
        match &self.nodes[v.0].op {
            Op::Sum { a } => self.value(*a).data().iter().map(|&x| x as f64).sum(),
            _ => self.value(v).data()[0] as f64,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Records a copy of `t`; it participates in backward iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.push(t.clone(), t.requires_grad(), Op::Leaf, "leaf")
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, false, Op::Leaf, "constant")
    }

    /// Records a named parameter leaf. Binding the same name twice returns
    /// the first binding.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Result<Var> {
        if let Some(&v) = self.param_index.get(name) {
            return Ok(v);
        }
        let v = self.leaf(t)?;
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.param_index.get(name).copied()
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, rg, Op::Matmul { a, b }, "matmul")
    }

    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let out = ops::bmm(self.value(a), self.value(b), trans_b)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, rg, Op::Bmm { a, b, trans_b }, "bmm")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                expected: ta.shape().to_vec(),
                got: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, rg, Op::Add { a, b }, "add")
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s (bias add).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::ShapeMismatch {
                op: "add_broadcast",
                expected: sa[sa.len().saturating_sub(sb.len())..].to_vec(),
                got: sb.to_vec(),
            });
        }
        let m = tb.numel();
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_exact_mut(m) {
            chunk.iter_mut().zip(tb.data()).for_each(|(x, y)| *x += y);
        }
        let out = Tensor::from_parts(sa.to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, rg, Op::AddBroadcast { a, b }, "add_broadcast")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                expected: ta.shape().to_vec(),
                got: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, rg, Op::Mul { a, b }, "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::from_parts(
            t.shape().to_vec(),
            t.data().iter().map(|x| x * factor).collect(),
        );
        let rg = self.rg(a);
        self.push(out, rg, Op::Scale { a, factor }, "scale")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        self.push(out, rg, Op::Reshape { a }, "reshape")
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let out = ops::permute(self.value(a), perm)?;
        let rg = self.rg(a);
        self.push(
            out,
            rg,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            "permute",
        )
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(self.value(a), axis)?;
        let rg = self.rg(a);
        self.push(out, rg, Op::Softmax { a, axis }, "softmax")
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let d = ops::check_layer_norm(self.value(x), self.value(gamma), self.value(beta))?;
        let r = ops::layer_norm_forward(
            self.value(x).data(),
            d,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let out = Tensor::from_parts(self.shape(x).to_vec(), r.y);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat: r.xhat,
            rstd: r.rstd,
        };
        self.push(out, rg, op, "layer_norm")
    }

    fn unary(&mut self, a: Var, f: impl Fn(f32) -> f32, op: Op, name: &'static str) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect());
        let rg = self.rg(a);
        self.push(out, rg, op, name)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, ops::gelu, Op::Gelu { a }, "gelu")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu { a }, "relu")
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        // evaluated in f64 so the f32 result is correctly rounded
        self.unary(a, |v| (v as f64).sin() as f32, Op::Sin { a }, "sin")
    }

    /// Zero-padded stride-1 convolution of a `[B, H, W, Cin]` map.
    pub fn conv2d_same(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let geom = ops::conv_geom(self.shape(x), self.shape(w), self.shape(b))?;
        let cols = ops::im2col(self.value(x).data(), &geom);
        let out = ops::conv_forward(&cols, self.value(w).data(), self.value(b).data(), &geom);
        let out = Tensor::from_parts(vec![geom.batch, geom.height, geom.width, geom.c_out], out);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        // the unfolded input is only needed for the weight gradient
        let cols = if self.rg(w) { cols } else { Vec::new() };
        self.push(
            out,
            rg,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            "conv2d_same",
        )
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(invalid(
                "mean_axis",
                format!("axis {axis} out of range for rank {}", t.rank()),
            ));
        }
        let (outer, len, inner) = ops::axis_split(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..len)
                    .map(|j| src[(o * len + j) * inner + i] as f64)
                    .sum();
                out[o * inner + i] = (s / len as f64) as f32;
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::from_parts(shape, out);
        let rg = self.rg(a);
        self.push(out, rg, Op::MeanAxis { a, axis }, "mean_axis")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s as f32), rg, Op::Sum { a }, "sum")
    }

    /// Mean cross-entropy of `[B, C]` logits against smoothed targets
    /// `(1 − ε)·onehot + ε/C`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: f32) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != targets.len() {
            return Err(invalid(
                "cross_entropy",
                format!("logits {:?} vs {} targets", t.shape(), targets.len()),
            ));
        }
        let (b, c) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
            return Err(invalid(
                "cross_entropy",
                format!("target {bad} >= {c} classes"),
            ));
        }
        let probs = ops::softmax(t, 1)?.into_data();
        let mut loss = 0.0f64;
        for (i, &y) in targets.iter().enumerate() {
            let row = &t.data()[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = max
                + row
                    .iter()
                    .map(|&v| (v as f64 - max).exp())
                    .sum::<f64>()
                    .ln();
            let mean_logit = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            let smooth = smoothing as f64;
            loss += (1.0 - smooth) * (lse - row[y] as f64) + smooth * (lse - mean_logit);
        }
        let out = Tensor::scalar((loss / b as f64) as f32);
        let rg = self.rg(logits);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            smoothing,
            probs,
        };
        self.push(out, rg, op, "cross_entropy")
    }

    /// Expands a `[H, 2h−1, 2w−1]` relative bias table to `[H, N, N(+1)]`.
    pub fn relative_bias(&mut self, table: Var, h: usize, w: usize, pad: bool) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 3 || s[1] != 2 * h - 1 || s[2] != 2 * w - 1 {
            return Err(Error::Geometry(format!(
                "relative bias table {s:?} does not fit a {h}x{w} token grid"
            )));
        }
        let heads = s[0];
        let r = ops::relative_bias_forward(self.value(table).data(), heads, h, w, pad);
        let n = h * w;
        let out = Tensor::from_parts(vec![heads, n, n + usize::from(pad)], r.bias);
        let rg = self.rg(table);
        let op = Op::RelativeBias {
            table,
            heads,
            h,
            w,
            pad,
            pad_argmax: r.pad_argmax,
        };
        self.push(out, rg, op, "relative_bias")
    }

    /// Appends `extra` zero entries along the last axis.
    pub fn pad_last(&mut self, a: Var, extra: usize) -> Result<Var> {
        let t = self.value(a);
        let last = *t
            .shape()
            .last()
            .ok_or_else(|| invalid("pad_last", "rank-0 input"))?;
        let mut data = Vec::with_capacity(t.numel() / last.max(1) * (last + extra));
        for row in t.data().chunks_exact(last) {
            data.extend_from_slice(row);
            data.extend(std::iter::repeat_n(0.0, extra));
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() += extra;
        let out = Tensor::from_parts(shape, data);
        let rg = self.rg(a);
        self.push(out, rg, Op::PadLast { a, extra }, "pad_last")
    }

    /// Keeps `len` entries of the last axis starting at `start`.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let last = *t
            .shape()
            .last()
            .ok_or_else(|| invalid("slice_last", "rank-0 input"))?;
        if start + len > last {
            return Err(invalid(
                "slice_last",
                format!("{start}+{len} exceeds extent {last}"),
            ));
        }
        let data = t
            .data()
            .chunks_exact(last)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::from_parts(shape, data);
        let rg = self.rg(a);
        self.push(out, rg, Op::SliceLast { a, start }, "slice_last")
    }

    /// Reverse pass from a scalar `loss`. Afterwards every `requires_grad`
    /// node has a gradient (zeros when unreachable) and the graph is sealed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::GraphConsumed);
        }
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout, &mut grads)?;
            grads[i] = Some(gout);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    pub fn is_consumed(&self) -> bool {
        self.grads.is_some()
    }

    /// Gradient of the loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Result<Tensor> {
        let grads = self.grads.as_ref().ok_or(Error::NoGradient)?;
        if !self.nodes[v.0].requires_grad {
            return Err(invalid("grad", "value does not require grad"));
        }
        let g = grads[v.0]
            .clone()
            .expect("requires_grad nodes always receive a gradient");
        Ok(Tensor::from_parts(self.shape(v).to_vec(), g))
    }

    /// Gradient of a named parameter, if it was bound and requires grad.
    pub fn param_grad(&self, name: &str) -> Result<Option<Tensor>> {
        match self.param_var(name) {
            Some(v) if self.rg(v) => self.grad(v).map(Some),
            _ => Ok(None),
        }
    }

    fn backprop_node(&self, i: usize, gout: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (rows, k, n) = ops::matmul_dims(ta.shape(), tb.shape())?;
                if self.rg(*a) {
                    let mut da = vec![0.0; rows * k];
                    ops::gemm(rows, n, k, gout, false, tb.data(), true, &mut da, 0.0);
                    accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    ops::gemm(k, rows, n, ta.data(), true, gout, false, &mut db, 0.0);
                    accumulate(grads, *b, db);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (g, m, k, n) = ops::bmm_dims(ta.shape(), tb.shape(), *trans_b)?;
                if self.rg(*a) {
                    let mut da = vec![0.0; g * m * k];
                    for s in 0..g {
                        let go = &gout[s * m * n..(s + 1) * m * n];
                        let bs = &tb.data()[s * k * n..(s + 1) * k * n];
                        // dA = dC · op(B)ᵀ
                        ops::gemm(
                            m,
                            n,
                            k,
                            go,
                            false,
                            bs,
                            !*trans_b,
                            &mut da[s * m * k..(s + 1) * m * k],
                            0.0,
                        );
                    }
                    accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; g * k * n];
                    for s in 0..g {
                        let go = &gout[s * m * n..(s + 1) * m * n];
                        let as_ = &ta.data()[s * m * k..(s + 1) * m * k];
                        let dst = &mut db[s * k * n..(s + 1) * k * n];
                        if *trans_b {
                            // B stored [n×k]: dB = dCᵀ · A
                            ops::gemm(n, m, k, go, true, as_, false, dst, 0.0);
                        } else {
                            ops::gemm(k, m, n, as_, true, go, false, dst, 0.0);
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                if self.rg(*a) {
                    accumulate(grads, *a, gout.to_vec());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, gout.to_vec());
                }
            }
            Op::AddBroadcast { a, b } => {
                if self.rg(*a) {
                    accumulate(grads, *a, gout.to_vec());
                }
                if self.rg(*b) {
                    let m = self.value(*b).numel();
                    let mut db = vec![0.0f32; m];
                    for chunk in gout.chunks_exact(m) {
                        db.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    accumulate(
                        grads,
                        *a,
                        gout.iter().zip(tb.data()).map(|(g, y)| g * y).collect(),
                    );
                }
                if self.rg(*b) {
                    accumulate(
                        grads,
                        *b,
                        gout.iter().zip(ta.data()).map(|(g, x)| g * x).collect(),
                    );
                }
            }
            Op::Scale { a, factor } => {
                accumulate(grads, *a, gout.iter().map(|g| g * factor).collect());
            }
            Op::Reshape { a } => accumulate(grads, *a, gout.to_vec()),
            Op::Permute { a, perm } => {
                let inv = ops::inverse_permutation(perm);
                let (_, back) = ops::permute_raw(gout, out_shape, &inv);
                accumulate(grads, *a, back);
            }
            Op::Softmax { a, axis } => {
                let dx = ops::softmax_backward(node.value.data(), gout, out_shape, *axis);
                accumulate(grads, *a, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *out_shape.last().unwrap();
                let g = self.value(*gamma).data();
                if self.rg(*x) {
                    let mut dx = vec![0.0f32; gout.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let (go, xh) = (&gout[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                        let mut m1 = 0.0f64;
                        let mut m2 = 0.0f64;
                        for j in 0..d {
                            let dxh = (go[j] * g[j]) as f64;
                            m1 += dxh;
                            m2 += dxh * xh[j] as f64;
                        }
                        let (m1, m2) = ((m1 / d as f64) as f32, (m2 / d as f64) as f32);
                        for j in 0..d {
                            dx[r * d + j] = rs * (go[j] * g[j] - m1 - xh[j] * m2);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.rg(*gamma) {
                    let mut dg = vec![0.0f32; d];
                    for (go, xh) in gout.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += go[j] * xh[j];
                        }
                    }
                    accumulate(grads, *gamma, dg);
                }
                if self.rg(*beta) {
                    let mut db = vec![0.0f32; d];
                    for go in gout.chunks_exact(d) {
                        db.iter_mut().zip(go).for_each(|(s, v)| *s += v);
                    }
                    accumulate(grads, *beta, db);
                }
            }
            Op::Gelu { a } => {
                let x = self.value(*a).data();
                accumulate(
                    grads,
                    *a,
                    gout.iter()
                        .zip(x)
                        .map(|(g, &v)| g * ops::gelu_grad(v))
                        .collect(),
                );
            }
            Op::Relu { a } => {
                let x = self.value(*a).data();
                accumulate(
                    grads,
                    *a,
                    gout.iter()
                        .zip(x)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Sin { a } => {
                let x = self.value(*a).data();
                accumulate(
                    grads,
                    *a,
                    gout.iter().zip(x).map(|(g, &v)| g * v.cos()).collect(),
                );
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let (rows, patch, cout) = (geom.rows(), geom.patch(), geom.c_out);
                if self.rg(*x) {
                    let mut dcols = vec![0.0f32; rows * patch];
                    ops::gemm(
                        rows,
                        cout,
                        patch,
                        gout,
                        false,
                        self.value(*w).data(),
                        true,
                        &mut dcols,
                        0.0,
                    );
                    accumulate(grads, *x, ops::col2im(&dcols, geom));
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0f32; patch * cout];
                    ops::gemm(patch, rows, cout, cols, true, gout, false, &mut dw, 0.0);
                    accumulate(grads, *w, dw);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0f32; cout];
                    for row in gout.chunks_exact(cout) {
                        db.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::MeanAxis { a, axis } => {
                let in_shape = self.shape(*a);
                let (outer, len, inner) = ops::axis_split(in_shape, *axis);
                let mut dx = vec![0.0f32; outer * len * inner];
                let inv = 1.0 / len as f32;
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            dx[(o * len + j) * inner + i] = gout[o * inner + i] * inv;
                        }
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::Sum { a } => {
                let n = self.value(*a).numel();
                accumulate(grads, *a, vec![gout[0]; n]);
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let b = targets.len() as f32;
                let off = smoothing / c as f32;
                let mut dx = probs.clone();
                for (i, &y) in targets.iter().enumerate() {
                    let row = &mut dx[i * c..(i + 1) * c];
                    for v in row.iter_mut() {
                        *v = (*v - off) * gout[0] / b;
                    }
                    row[y] -= (1.0 - smoothing) * gout[0] / b;
                }
                accumulate(grads, *logits, dx);
            }
            Op::RelativeBias {
                table,
                heads,
                h,
                w,
                pad,
                pad_argmax,
            } => {
                let dt = ops::relative_bias_backward(gout, pad_argmax, *heads, *h, *w, *pad);
                accumulate(grads, *table, dt);
            }
            Op::PadLast { a, extra } => {
                let last = *out_shape.last().unwrap();
                let keep = last - extra;
                let dx = gout
                    .chunks_exact(last)
                    .flat_map(|r| r[..keep].iter().copied())
                    .collect();
                accumulate(grads, *a, dx);
            }
            Op::SliceLast { a, start } => {
                let len = *out_shape.last().unwrap();
                let full = *self.shape(*a).last().unwrap();
                let mut dx = vec![0.0f32; self.value(*a).numel()];
                for (dst, src) in dx.chunks_exact_mut(full).zip(gout.chunks_exact(len)) {
                    dst[*start..*start + len].copy_from_slice(src);
                }
                accumulate(grads, *a, dx);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, contribution: Vec<f32>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
        slot @ None => *slot = Some(contribution),
    }
}
