use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::Serialize;

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f32,
    pub tol: f64,
    /// Check at most this many entries, sampled without replacement.
    pub max_entries: Option<usize>,
    pub seed: u64,
    /// Relative jump between one-sided slopes that marks a kink.
    pub kink_tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tol: 1e-3,
            max_entries: None,
            seed: 0,
            kink_tol: 0.1,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EntryCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub kink: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<EntryCheck>,
    /// Largest relative error over entries not flagged as kinks.
    pub max_rel_err: f64,
    pub flagged: Vec<usize>,
    pub pass: bool,
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compares the tape gradient of `f` at `x` with central differences.
///
/// A non-scalar output `y` is reduced to `Σ wᵢ·yᵢ` with fixed normal weights;
/// the reduction of perturbed outputs is done in `f64` (as is a trailing
/// `sum` of a scalar `f`), and each difference
/// quotient divides by the perturbation actually representable in `f32`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut rng = StdRng::seed_from_u64(cfg.seed);

    let mut g = Graph::new();
    let xv = g.leaf(&x.clone().with_requires_grad(true))?;
    let y = f(&mut g, xv)?;
    let weights = if g.value(y).numel() == 1 {
        None
    } else {
        Some(Tensor::randn(g.shape(y).to_vec(), 1.0, &mut rng))
    };
    let loss = match &weights {
        None => y,
        Some(w) => {
            let wv = g.constant(w.clone())?;
            let p = g.mul(y, wv)?;
            g.sum(p)?
        }
    };
    g.backward(loss)?;
    let analytic = g.grad(xv)?;

    let eval = |xt: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(xt.clone())?;
        let out = f(&mut g, v)?;
        Ok(match &weights {
            None => g.scalar_f64(out),
            Some(w) => g
                .value(out)
                .data()
                .iter()
                .zip(w.data())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum(),
        })
    };

    let n = x.numel();
    let indices: Vec<usize> = match cfg.max_entries {
        Some(m) if m < n => {
            let mut idx = rand::seq::index::sample(&mut rng, n, m).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    };

    let f0 = eval(x)?;
    let mut entries = Vec::with_capacity(indices.len());
    for &i in &indices {
        let x0 = x.data()[i];
        let (xp, xm) = (x0 + cfg.step, x0 - cfg.step);
        let mut probe = x.clone();
        probe.data_mut()[i] = xp;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = xm;
        let fm = eval(&probe)?;
        let numeric = (fp - fm) / (xp as f64 - xm as f64);
        let d_plus = (fp - f0) / (xp as f64 - x0 as f64);
        let d_minus = (f0 - fm) / (x0 as f64 - xm as f64);
        let kink =
            (d_plus - d_minus).abs() > cfg.kink_tol * d_plus.abs().max(d_minus.abs()).max(1.0);
        let a = analytic.data()[i] as f64;
        entries.push(EntryCheck {
            index: i,
            analytic: a,
            numeric,
            rel_err: rel_err(a, numeric),
            kink,
        });
    }
    Ok(summarize(entries, cfg.tol))
}

/// Like [`finite_diff_check`], but the numeric side differentiates
/// `reference`, an `f64` evaluation of the same function on the flattened
/// input returning the flattened output. This removes `f32` rounding from the
/// difference quotient, so small gradient entries are resolved too.
pub fn finite_diff_check_ref<F, R>(
    f: F,
    reference: R,
    x: &Tensor,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
    R: Fn(&[f64]) -> Vec<f64>,
{
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut g = Graph::new();
    let xv = g.leaf(&x.clone().with_requires_grad(true))?;
    let y = f(&mut g, xv)?;
    let x64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let y64 = reference(&x64);
    let forward = g.value(y).data();
    let scale = y64.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let agree = y64.len() == forward.len()
        && forward
            .iter()
            .zip(&y64)
            .all(|(&a, &b)| (a as f64 - b).abs() <= 1e-4 * scale);
    if !agree {
        return Err(crate::error::invalid(
            "finite_diff_check_ref",
            "reference output disagrees with the recorded forward pass",
        ));
    }
    let weights: Vec<f64> = if forward.len() == 1 {
        vec![1.0]
    } else {
        Tensor::randn(g.shape(y).to_vec(), 1.0, &mut rng)
            .data()
            .iter()
            .map(|&v| v as f64)
            .collect()
    };
    let loss = if forward.len() == 1 {
        y
    } else {
        let wv = g.constant(Tensor::new(
            g.shape(y).to_vec(),
            weights.iter().map(|&v| v as f32).collect(),
        )?)?;
        let p = g.mul(y, wv)?;
        g.sum(p)?
    };
    g.backward(loss)?;
    let analytic = g.grad(xv)?;
    let eval = |p: &[f64]| -> f64 { reference(p).iter().zip(&weights).map(|(a, b)| a * b).sum() };

    let n = x.numel();
    let indices: Vec<usize> = match cfg.max_entries {
        Some(m) if m < n => {
            let mut idx = rand::seq::index::sample(&mut rng, n, m).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    };
    let h = cfg.step as f64;
    let f0 = eval(&x64);
    let mut entries = Vec::with_capacity(indices.len());
    for &i in &indices {
        let mut probe = x64.clone();
        probe[i] = x64[i] + h;
        let fp = eval(&probe);
        probe[i] = x64[i] - h;
        let fm = eval(&probe);
        let numeric = (fp - fm) / (2.0 * h);
        let (d_plus, d_minus) = ((fp - f0) / h, (f0 - fm) / h);
        let kink =
            (d_plus - d_minus).abs() > cfg.kink_tol * d_plus.abs().max(d_minus.abs()).max(1.0);
        let a = analytic.data()[i] as f64;
        entries.push(EntryCheck {
            index: i,
            analytic: a,
            numeric,
            rel_err: rel_err(a, numeric),
            kink,
        });
    }
    Ok(summarize(entries, cfg.tol))
}

fn summarize(entries: Vec<EntryCheck>, tol: f64) -> GradCheckReport {
    let flagged: Vec<usize> = entries.iter().filter(|e| e.kink).map(|e| e.index).collect();
    let max_rel_err = entries
        .iter()
        .filter(|e| !e.kink)
        .map(|e| e.rel_err)
        .fold(0.0, f64::max);
    GradCheckReport {
        pass: max_rel_err < tol,
        entries,
        max_rel_err,
        flagged,
    }
}
