//! CIFAR binary ingestion, stratified subsets and a synthetic stand-in.
//!
//! CIFAR records are one label byte (CIFAR-10) or a coarse and a fine label
//! byte (CIFAR-100), followed by 3072 pixel bytes: the 32×32 red plane, then
//! green, then blue, each row-major. Images are kept as `u8` in
//! height × width × channel order (RGB) and scaled to [0, 1] when batched.

use std::fs;
use std::path::{Path, PathBuf};

use prs_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::Augment;
use crate::error::{data_err, Result};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = CIFAR_SIDE * CIFAR_SIDE * 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl CifarVariant {
    pub fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + CIFAR_PIXELS
    }

    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    /// Files of a split with their record counts.
    pub fn files(self, split: Split) -> Vec<(&'static str, usize)> {
        match (self, split) {
            (CifarVariant::Cifar10, Split::Train) => vec![
                ("data_batch_1.bin", 10_000),
                ("data_batch_2.bin", 10_000),
                ("data_batch_3.bin", 10_000),
                ("data_batch_4.bin", 10_000),
                ("data_batch_5.bin", 10_000),
            ],
            (CifarVariant::Cifar10, Split::Test) => vec![("test_batch.bin", 10_000)],
            (CifarVariant::Cifar100, Split::Train) => vec![("train.bin", 50_000)],
            (CifarVariant::Cifar100, Split::Test) => vec![("test.bin", 10_000)],
        }
    }

    fn stats(self) -> ([f32; 3], [f32; 3]) {
        match self {
            CifarVariant::Cifar10 => ([0.4914, 0.4822, 0.4465], [0.2470, 0.2435, 0.2616]),
            CifarVariant::Cifar100 => ([0.5071, 0.4865, 0.4409], [0.2673, 0.2564, 0.2762]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    /// `len × height × width × channels` bytes.
    pub pixels: Vec<u8>,
    pub labels: Vec<usize>,
    /// Record index of each sample in the source split.
    pub source_index: Vec<usize>,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Keeps the samples at `keep`, in that order.
    pub fn select(&self, keep: &[usize]) -> Dataset {
        let n = self.image_len();
        let mut pixels = Vec::with_capacity(keep.len() * n);
        for &i in keep {
            pixels.extend_from_slice(self.image(i));
        }
        Dataset {
            pixels,
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            source_index: keep.iter().map(|&i| self.source_index[i]).collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            height: self.height,
            width: self.width,
            channels: self.channels,
            classes: self.classes,
            pixels: Vec::new(),
            labels: Vec::new(),
            source_index: Vec::new(),
            mean: self.mean.clone(),
            std: self.std.clone(),
        }
    }

    /// `[B, H, W, C]` floats for the samples at `idx`: scaled to [0, 1],
    /// augmented when `augment` is given, then normalised if requested.
    pub fn batch<R: Rng + ?Sized>(
        &self,
        idx: &[usize],
        augment: Option<(&Augment, &mut R)>,
        normalize: bool,
    ) -> (Tensor, Vec<usize>) {
        let (h, w, c) = (self.height, self.width, self.channels);
        let n = self.image_len();
        let mut data = Vec::with_capacity(idx.len() * n);
        let mut aug = augment;
        for &i in idx {
            let mut img: Vec<f32> = self.image(i).iter().map(|&b| b as f32 / 255.0).collect();
            if let Some((a, rng)) = aug.as_mut() {
                img = a.apply(&img, h, w, c, *rng);
            }
            if normalize {
                for (j, v) in img.iter_mut().enumerate() {
                    let ch = j % c;
                    *v = (*v - self.mean[ch]) / self.std[ch];
                }
            }
            data.extend_from_slice(&img);
        }
        let t = Tensor::new(vec![idx.len(), h, w, c], data).expect("extents match");
        (t, idx.iter().map(|&i| self.labels[i]).collect())
    }
}

/// Equal-count random subset per class: `⌊fraction · min_c n_c⌋` samples of
/// every class, drawn with `seed`, returned in ascending index order.
pub fn stratified_subset(labels: &[usize], classes: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let mut by_class = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let min = by_class.iter().map(Vec::len).min().unwrap_or(0);
    let per = ((fraction * min as f64) + 1e-9).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(per * classes);
    for idx in &mut by_class {
        idx.shuffle(&mut rng);
        keep.extend_from_slice(&idx[..per]);
    }
    keep.sort_unstable();
    keep
}

/// Reads one split of CIFAR-10 or CIFAR-100 from `dir` and keeps a
/// stratified `fraction` of it (all of it at 1.0).
pub fn load_cifar(
    dir: &Path,
    variant: CifarVariant,
    split: Split,
    fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(data_err(
            dir,
            format!("fraction must lie in (0, 1], got {fraction}"),
        ));
    }
    if !dir.is_dir() {
        return Err(data_err(dir, "dataset directory does not exist"));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (name, count) in variant.files(split) {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| data_err(&path, format!("cannot read: {e}")))?;
        decode_records(
            &path,
            &bytes,
            variant,
            Some(count),
            &mut pixels,
            &mut labels,
        )?;
    }
    let (mean, std) = variant.stats();
    let full = Dataset {
        height: CIFAR_SIDE,
        width: CIFAR_SIDE,
        channels: 3,
        classes: variant.classes(),
        source_index: (0..labels.len()).collect(),
        pixels,
        labels,
        mean: mean.to_vec(),
        std: std.to_vec(),
    };
    if fraction >= 1.0 {
        return Ok(full);
    }
    let keep = stratified_subset(&full.labels, full.classes, fraction, seed);
    Ok(full.select(&keep))
}

/// Appends the records in `bytes` as HWC pixels. With `expected` set the
/// byte length must match that record count exactly.
pub fn decode_records(
    path: &Path,
    bytes: &[u8],
    variant: CifarVariant,
    expected: Option<usize>,
    pixels: &mut Vec<u8>,
    labels: &mut Vec<usize>,
) -> Result<()> {
    let rec = variant.record_len();
    if let Some(n) = expected {
        if bytes.len() != n * rec {
            return Err(data_err(
                path,
                format!(
                    "wrong file size: expected {} bytes ({n} records of {rec}), found {}",
                    n * rec,
                    bytes.len()
                ),
            ));
        }
    }
    if !bytes.len().is_multiple_of(rec) {
        return Err(data_err(
            path,
            format!(
                "truncated record: {} bytes is not a multiple of {rec}",
                bytes.len()
            ),
        ));
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    for (r, chunk) in bytes.chunks_exact(rec).enumerate() {
        let label = chunk[variant.label_bytes() - 1] as usize;
        if label >= variant.classes() {
            return Err(data_err(
                path,
                format!("record {r}: label {label} out of range"),
            ));
        }
        labels.push(label);
        let px = &chunk[variant.label_bytes()..];
        for p in 0..plane {
            for c in 0..3 {
                pixels.push(px[c * plane + p]);
            }
        }
    }
    Ok(())
}

/// One binary record from HWC pixels; `coarse` is ignored for CIFAR-10.
pub fn encode_record(variant: CifarVariant, coarse: u8, label: u8, hwc: &[u8]) -> Vec<u8> {
    assert_eq!(hwc.len(), CIFAR_PIXELS);
    let mut out = Vec::with_capacity(variant.record_len());
    if variant == CifarVariant::Cifar100 {
        out.push(coarse);
    }
    out.push(label);
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    for c in 0..3 {
        for p in 0..plane {
            out.push(hwc[p * 3 + c]);
        }
    }
    out
}

/// Class-conditional sinusoidal textures with pixel noise. Class `k` fixes
/// the spatial frequency, orientation and colour; phase and noise are random.
/// Labels cycle through the classes so counts are balanced.
pub fn synthetic(
    n: usize,
    classes: usize,
    height: usize,
    width: usize,
    channels: usize,
    seed: u64,
) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * height * width * channels);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        let angle = std::f32::consts::PI * (k % 5) as f32 / 5.0;
        let freq = 1.0 + (k / 5 % 3) as f32;
        let (fy, fx) = (freq * angle.sin(), freq * angle.cos());
        let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
        for y in 0..height {
            for x in 0..width {
                let arg = std::f32::consts::TAU
                    * (fy * y as f32 / height as f32 + fx * x as f32 / width as f32)
                    + phase;
                let s = arg.sin();
                for c in 0..channels {
                    let tint = 0.5 + 0.4 * (((k + c) % 3) as f32 - 1.0);
                    let noise: f32 = rng.random_range(-0.15..0.15);
                    let v = 0.5 + 0.3 * tint * s + noise;
                    pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        labels.push(k);
    }
    Dataset {
        height,
        width,
        channels,
        classes,
        pixels,
        labels,
        source_index: (0..n).collect(),
        mean: vec![0.5; channels],
        std: vec![0.25; channels],
    }
}

/// `env_var` when it is set and non-empty, otherwise the configured path.
pub fn resolve_dir(path: Option<&Path>, env_var: &str) -> Option<PathBuf> {
    std::env::var_os(env_var)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .or_else(|| path.map(Path::to_path_buf))
}
