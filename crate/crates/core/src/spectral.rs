//! Fourier analysis of token feature maps.
//!
//! Each `(sample, channel)` map of a `[B, h, w, d]` grid goes through an
//! unnormalised 2-D DFT, so `Σ|F|² = h·w·Σx²`. Lattice frequency `k` along an
//! axis of length `n` is `2πk/n` with `k ∈ [−n/2, n/2]`, so Nyquist sits at
//! `π`. Points are binned by radial magnitude, clipped to `π`, into bins of
//! width `Δf` centred on `0, Δf, 2Δf, …`.

use std::fmt::Write as _;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{GridShape, Model, TokenGrid};
use crate::schedule::PrSchedule;
use crate::tensor::{Graph, Tensor};

use std::f64::consts::PI;

/// The three frequencies a depth profile reports.
pub const TARGETS: [f64; 3] = [PI / 3.0, 2.0 * PI / 3.0, PI];

pub const AMPLITUDE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BinWidth {
    /// `max(π/16, 2π/min(h, w))`: one lattice step on small grids, so no
    /// bin between 0 and π is empty.
    Auto,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Averaging {
    /// Mean of `log(|F| + floor)`.
    LogThenMean,
    /// `log(mean |F| + floor)`.
    MeanThenLog,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tap {
    /// Block output `z_l`.
    PostResidual,
    /// Token mixer output before the residual add.
    PreResidual,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumConfig {
    pub bin_width: BinWidth,
    pub floor: f64,
    pub averaging: Averaging,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        Self {
            bin_width: BinWidth::Auto,
            floor: AMPLITUDE_FLOOR,
            averaging: Averaging::LogThenMean,
        }
    }
}

impl SpectrumConfig {
    pub fn resolve_width(&self, grid: GridShape) -> f64 {
        match self.bin_width {
            BinWidth::Fixed(w) => w,
            BinWidth::Auto => (PI / 16.0).max(2.0 * PI / grid.height.min(grid.width) as f64),
        }
    }
}

/// Radially binned log amplitude. Only populated bins are listed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumProfile {
    /// Bin centres, strictly increasing, starting at 0.
    pub bins: Vec<f64>,
    pub log_amp: Vec<f64>,
    /// Lattice points per bin.
    pub counts: Vec<usize>,
    pub n_maps: usize,
    pub bin_width: f64,
    pub grid: GridShape,
}

impl SpectrumProfile {
    fn position(&self, f: f64) -> Option<usize> {
        let centre = (f / self.bin_width).round() * self.bin_width;
        self.bins
            .iter()
            .position(|&b| (b - centre).abs() < 1e-9 * self.bin_width.max(1.0))
    }
}

fn axis_freq(k: usize, n: usize) -> f64 {
    let signed = if 2 * k <= n {
        k as f64
    } else {
        k as f64 - n as f64
    };
    2.0 * PI * signed / n as f64
}

fn bin_of(r: f64, width: f64) -> usize {
    (r.min(PI) / width).round() as usize
}

fn check_grid(grid: GridShape) -> Result<()> {
    if grid.height < 2 || grid.width < 2 {
        return Err(Error::Geometry(format!(
            "spectral analysis needs at least a 2x2 token grid, got {}x{}",
            grid.height, grid.width
        )));
    }
    Ok(())
}

fn check_width(width: f64) -> Result<()> {
    if !(width > 0.0 && width <= PI) {
        return Err(Error::InvalidArgument {
            op: "spectrum",
            msg: format!("bin width must lie in (0, π], got {width}"),
        });
    }
    Ok(())
}

struct Dft2 {
    h: usize,
    w: usize,
    rows: Arc<dyn Fft<f64>>,
    cols: Arc<dyn Fft<f64>>,
    col_buf: Vec<Complex<f64>>,
}

impl Dft2 {
    fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            h,
            w,
            rows: planner.plan_fft_forward(w),
            cols: planner.plan_fft_forward(h),
            col_buf: vec![Complex::default(); h],
        }
    }

    /// In-place transform of a row-major `h×w` buffer.
    fn run(&mut self, buf: &mut [Complex<f64>]) {
        let (h, w) = (self.h, self.w);
        for row in buf.chunks_exact_mut(w) {
            self.rows.process(row);
        }
        for c in 0..w {
            for r in 0..h {
                self.col_buf[r] = buf[r * w + c];
            }
            self.cols.process(&mut self.col_buf);
            for r in 0..h {
                buf[r * w + c] = self.col_buf[r];
            }
        }
    }
}

/// `|F(u, v)|` of one row-major `h×w` map, unnormalised.
pub fn dft2_amplitudes(map: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    if map.len() != h * w || h == 0 || w == 0 {
        return Err(Error::ShapeMismatch {
            op: "dft2_amplitudes",
            expected: vec![h, w],
            got: vec![map.len()],
        });
    }
    let mut buf: Vec<Complex<f64>> = map.iter().map(|&x| Complex::new(x, 0.0)).collect();
    Dft2::new(h, w).run(&mut buf);
    Ok(buf.iter().map(|c| c.norm()).collect())
}

/// Streams token grids of one geometry into per-bin sums.
pub struct SpectrumAccumulator {
    cfg: SpectrumConfig,
    grid: GridShape,
    width: f64,
    bin: Vec<usize>,
    points: Vec<usize>,
    sums: Vec<f64>,
    n_maps: usize,
    dft: Dft2,
    buf: Vec<Complex<f64>>,
}

impl SpectrumAccumulator {
    pub fn new(grid: GridShape, cfg: SpectrumConfig) -> Result<Self> {
        check_grid(grid)?;
        let width = cfg.resolve_width(grid);
        check_width(width)?;
        let (h, w) = (grid.height, grid.width);
        let n_bins = (PI / width).round() as usize + 1;
        let mut bin = Vec::with_capacity(h * w);
        let mut points = vec![0usize; n_bins];
        for u in 0..h {
            for v in 0..w {
                let r = axis_freq(u, h).hypot(axis_freq(v, w));
                let b = bin_of(r, width).min(n_bins - 1);
                bin.push(b);
                points[b] += 1;
            }
        }
        Ok(Self {
            cfg,
            grid,
            width,
            bin,
            points,
            sums: vec![0.0; n_bins],
            n_maps: 0,
            dft: Dft2::new(h, w),
            buf: vec![Complex::default(); h * w],
        })
    }

    pub fn add(&mut self, x: &TokenGrid) -> Result<()> {
        if x.grid() != self.grid {
            return Err(Error::Geometry(format!(
                "spectrum accumulates {}x{} grids, got {}x{}",
                self.grid.height,
                self.grid.width,
                x.grid().height,
                x.grid().width
            )));
        }
        let (h, w, d) = (self.grid.height, self.grid.width, x.dim());
        let data = x.tensor().data();
        for b in 0..x.batch() {
            let base = b * h * w * d;
            for c in 0..d {
                for (p, slot) in self.buf.iter_mut().enumerate() {
                    *slot = Complex::new(data[base + p * d + c] as f64, 0.0);
                }
                self.dft.run(&mut self.buf);
                for (p, z) in self.buf.iter().enumerate() {
                    let a = z.norm();
                    self.sums[self.bin[p]] += match self.cfg.averaging {
                        Averaging::LogThenMean => (a + self.cfg.floor).ln(),
                        Averaging::MeanThenLog => a,
                    };
                }
                self.n_maps += 1;
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<SpectrumProfile> {
        if self.n_maps == 0 {
            return Err(Error::InvalidArgument {
                op: "spectrum",
                msg: "no feature maps were added".into(),
            });
        }
        let mut p = SpectrumProfile {
            bins: Vec::new(),
            log_amp: Vec::new(),
            counts: Vec::new(),
            n_maps: self.n_maps,
            bin_width: self.width,
            grid: self.grid,
        };
        for (i, (&s, &n)) in self.sums.iter().zip(&self.points).enumerate() {
            if n == 0 {
                continue;
            }
            let mean = s / (n * self.n_maps) as f64;
            p.bins.push(i as f64 * self.width);
            p.counts.push(n);
            p.log_amp.push(match self.cfg.averaging {
                Averaging::LogThenMean => mean,
                Averaging::MeanThenLog => (mean + self.cfg.floor).ln(),
            });
        }
        Ok(p)
    }
}

pub fn feature_spectrum(x: &TokenGrid, cfg: &SpectrumConfig) -> Result<SpectrumProfile> {
    let mut acc = SpectrumAccumulator::new(x.grid(), *cfg)?;
    acc.add(x)?;
    acc.finish()
}

/// Smallest square grid of side at least `from` on which `f_target` lands in
/// a populated bin other than bin 0 under `cfg`. Population is not monotone
/// in the side, so a larger grid than the answer can still miss.
pub fn min_grid_for(f_target: f64, cfg: &SpectrumConfig, from: usize) -> Option<usize> {
    (from.max(2)..=512).find(|&n| {
        let grid = GridShape::new(n, n);
        let width = cfg.resolve_width(grid);
        if check_width(width).is_err() {
            return false;
        }
        let target = bin_of(f_target, width);
        target != 0
            && (0..n).any(|u| {
                (0..n).any(|v| bin_of(axis_freq(u, n).hypot(axis_freq(v, n)), width) == target)
            })
    })
}

/// Log amplitude in the bin holding `f_target` minus that of bin 0.
pub fn delta_log_amplitude(p: &SpectrumProfile, f_target: f64) -> Result<f64> {
    if !(f_target > 0.0 && f_target <= PI) {
        return Err(Error::InvalidArgument {
            op: "delta_log_amplitude",
            msg: format!("target frequency must lie in (0, π], got {f_target}"),
        });
    }
    let target = p.position(f_target).filter(|&i| p.bins[i] > 0.0);
    let zero = p.position(0.0);
    match (zero, target) {
        (Some(z), Some(t)) => Ok(p.log_amp[t] - p.log_amp[z]),
        _ => {
            let cfg = SpectrumConfig {
                bin_width: BinWidth::Fixed(p.bin_width),
                ..SpectrumConfig::default()
            };
            let side = p.grid.height.max(p.grid.width);
            let need = match (
                min_grid_for(f_target, &cfg, 2),
                min_grid_for(f_target, &cfg, side + 1),
            ) {
                (Some(a), Some(b)) if a < side => format!("a {a}x{a} or {b}x{b} token grid"),
                (_, Some(b)) => format!("a {b}x{b} token grid"),
                _ => "a narrower bin width".into(),
            };
            Err(Error::Geometry(format!(
                "frequency {f_target:.4} has no populated bin of width {:.4} on a {}x{} grid; try {need}",
                p.bin_width, p.grid.height, p.grid.width
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthEntry {
    pub layer: usize,
    /// `l / L`.
    pub depth: f64,
    /// `Δ log amplitude` at each of `DepthProfile::targets`.
    pub delta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthProfile {
    pub targets: Vec<f64>,
    pub tap: Tap,
    pub entries: Vec<DepthEntry>,
}

impl DepthProfile {
    /// Rows `depth,f,delta_log_amp`, one per layer and target.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("depth,f,delta_log_amp\n");
        for e in &self.entries {
            for (f, d) in self.targets.iter().zip(&e.delta) {
                let _ = writeln!(s, "{},{},{}", e.depth, f, d);
            }
        }
        s
    }

    /// Least-squares slope of `Δ(f)` against normalised depth.
    pub fn slope(&self, target: usize) -> Option<f64> {
        let n = self.entries.len();
        if n < 2 || target >= self.targets.len() {
            return None;
        }
        let xm = self.entries.iter().map(|e| e.depth).sum::<f64>() / n as f64;
        let ym = self.entries.iter().map(|e| e.delta[target]).sum::<f64>() / n as f64;
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for e in &self.entries {
            sxy += (e.depth - xm) * (e.delta[target] - ym);
            sxx += (e.depth - xm) * (e.depth - xm);
        }
        Some(sxy / sxx)
    }
}

fn entries_from(profiles: &[SpectrumProfile], targets: &[f64]) -> Result<Vec<DepthEntry>> {
    let total = profiles.len();
    profiles
        .iter()
        .enumerate()
        .map(|(i, p)| {
            Ok(DepthEntry {
                layer: i + 1,
                depth: (i + 1) as f64 / total as f64,
                delta: targets
                    .iter()
                    .map(|&f| delta_log_amplitude(p, f))
                    .collect::<Result<_>>()?,
            })
        })
        .collect()
}

/// Depth profile of precomputed per-layer feature grids, shallowest first.
pub fn depth_profile_from_grids(
    layers: &[TokenGrid],
    cfg: &SpectrumConfig,
    tap: Tap,
) -> Result<DepthProfile> {
    let profiles = layers
        .iter()
        .map(|x| feature_spectrum(x, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(DepthProfile {
        targets: TARGETS.to_vec(),
        tap,
        entries: entries_from(&profiles, &TARGETS)?,
    })
}

/// Depth profile from named feature dumps `<prefix>.<layer>` of shape
/// `[B, h, w, d]`, ordered by the numeric layer suffix.
pub fn depth_profile_from_tensors(
    tensors: &[(String, Tensor)],
    prefix: &str,
    cfg: &SpectrumConfig,
    tap: Tap,
) -> Result<DepthProfile> {
    let mut layers: Vec<(usize, TokenGrid)> = Vec::new();
    for (name, t) in tensors {
        let Some(rest) = name.strip_prefix(prefix).and_then(|r| r.strip_prefix('.')) else {
            continue;
        };
        let idx: usize = rest.parse().map_err(|_| {
            Error::Format(format!("feature tensor {name} lacks a numeric layer index"))
        })?;
        layers.push((idx, TokenGrid::new(t.clone())?));
    }
    if layers.is_empty() {
        return Err(Error::Format(format!("no tensors named {prefix}.<layer>")));
    }
    layers.sort_by_key(|(i, _)| *i);
    let grids: Vec<TokenGrid> = layers.into_iter().map(|(_, g)| g).collect();
    depth_profile_from_grids(&grids, cfg, tap)
}

/// Runs `images` through `model` in chunks and profiles every block.
pub fn depth_profile(
    model: &Model,
    images: &Tensor,
    t: u32,
    schedule: &PrSchedule,
    cfg: &SpectrumConfig,
    tap: Tap,
) -> Result<DepthProfile> {
    model.check_modes(schedule, t)?;
    let grid = model.grid();
    let mut accs = (0..model.blocks.len())
        .map(|_| SpectrumAccumulator::new(grid, *cfg))
        .collect::<Result<Vec<_>>>()?;
    let s = images.shape();
    if s.is_empty() || s[0] == 0 {
        return Err(Error::InvalidArgument {
            op: "depth_profile",
            msg: "empty image batch".into(),
        });
    }
    let per = images.numel() / s[0];
    const CHUNK: usize = 32;
    for start in (0..s[0]).step_by(CHUNK) {
        let n = CHUNK.min(s[0] - start);
        let mut shape = s.to_vec();
        shape[0] = n;
        let chunk = Tensor::new(
            shape,
            images.data()[start * per..(start + n) * per].to_vec(),
        )?;
        let mut g = Graph::new();
        let x = g.constant(chunk)?;
        let out = model.forward(&mut g, x)?;
        for (acc, b) in accs.iter_mut().zip(&out.blocks) {
            let v = match tap {
                Tap::PostResidual => b.out,
                Tap::PreResidual => b.mixer,
            };
            acc.add(&TokenGrid::new(g.value(v).clone())?)?;
        }
    }
    let profiles = accs
        .iter()
        .map(|a| a.finish())
        .collect::<Result<Vec<_>>>()?;
    Ok(DepthProfile {
        targets: TARGETS.to_vec(),
        tap,
        entries: entries_from(&profiles, &TARGETS)?,
    })
}
