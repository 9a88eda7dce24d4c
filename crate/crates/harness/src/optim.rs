//! AdamW with decoupled weight decay and a warmup + cosine learning rate.

use std::collections::BTreeMap;

use prs_core::nn::Params;
use prs_core::Tensor;

use crate::config::OptimConfig;
use crate::error::{Error, Result};

/// First and second moments of one parameter, with its own step count so
/// parameters created mid-run get correct bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: BTreeMap<String, Moments>,
}

/// Biases, norm scales and shifts, relative position tables and absolute
/// position tables are not decayed.
pub fn decays(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    !matches!(leaf, "bias" | "gamma" | "beta" | "rel_bias" | "pos")
}

impl AdamW {
    pub fn new(cfg: &OptimConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            state: BTreeMap::new(),
        }
    }

    pub fn state(&self) -> &BTreeMap<String, Moments> {
        &self.state
    }

    pub fn insert(&mut self, name: String, m: Moments) {
        self.state.insert(name, m);
    }

    /// Drops the moments of every parameter under `prefix`; returns how many.
    pub fn forget_prefix(&mut self, prefix: &str) -> usize {
        let before = self.state.len();
        self.state.retain(|k, _| !k.starts_with(prefix));
        before - self.state.len()
    }

    /// Updates every trainable tensor of `params` that has an entry in
    /// `grads`. Frozen tensors are left alone even if a gradient is given.
    pub fn step(
        &mut self,
        params: &mut dyn Params,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let wd = self.weight_decay;
        let mut err = None;
        params.visit_mut("", &mut |name, t| {
            if err.is_some() || !t.requires_grad() {
                return;
            }
            let Some(g) = grads.get(name) else { return };
            if g.shape() != t.shape() {
                err = Some(Error::Config(format!(
                    "gradient for {name} has extents {:?}, parameter {:?}",
                    g.shape(),
                    t.shape()
                )));
                return;
            }
            let st = self
                .state
                .entry(name.to_string())
                .or_insert_with(|| Moments {
                    step: 0,
                    m: vec![0.0; t.numel()],
                    v: vec![0.0; t.numel()],
                });
            st.step += 1;
            let bc1 = 1.0 - b1.powi(st.step as i32);
            let bc2 = 1.0 - b2.powi(st.step as i32);
            let decay = if decays(name) { lr * wd } else { 0.0 };
            let data = t.data_mut();
            #[allow(clippy::needless_range_loop)]
            for i in 0..data.len() {
                let gi = g.data()[i] as f64;
                let m = b1 * st.m[i] as f64 + (1.0 - b1) * gi;
                let v = b2 * st.v[i] as f64 + (1.0 - b2) * gi * gi;
                st.m[i] = m as f32;
                st.v[i] = v as f32;
                let p = data[i] as f64;
                let upd = (m / bc1) / ((v / bc2).sqrt() + eps);
                data[i] = (p - decay * p - lr * upd) as f32;
            }
        });
        err.map_or(Ok(()), Err)
    }
}

/// Linear warmup to `base` over `warmup` steps, then cosine decay to `min`
/// at `total` steps (or constant `base` when cosine decay is off).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub min: f64,
    pub warmup: u64,
    pub total: u64,
    pub cosine: bool,
}

impl LrSchedule {
    pub fn new(cfg: &OptimConfig, steps_per_epoch: u64, epochs: u32) -> Self {
        Self {
            base: cfg.lr,
            min: cfg.min_lr.min(cfg.lr),
            warmup: cfg.warmup_epochs as u64 * steps_per_epoch,
            total: epochs as u64 * steps_per_epoch,
            cosine: cfg.cosine,
        }
    }

    /// Rate for the 0-based global step `s`.
    pub fn at(&self, s: u64) -> f64 {
        if s < self.warmup {
            return self.base * (s + 1) as f64 / self.warmup as f64;
        }
        if !self.cosine {
            return self.base;
        }
        let span = self.total.saturating_sub(self.warmup).max(1) as f64;
        let progress = ((s - self.warmup) as f64 / span).min(1.0);
        self.min + (self.base - self.min) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
