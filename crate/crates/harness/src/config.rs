//! Training configuration.
//!
//! Config files are TOML: one `key = value` per line, `[section]` headers or
//! dotted keys (`model.dim = 64`) for nesting, `#` comments. Overrides given
//! as `section.key=value` are applied on top of the file before it is
//! validated; a value that does not parse as a TOML literal is taken as a
//! string, so `schedule.kind=all-conv` needs no quotes.

use std::path::{Path, PathBuf};

use prs_core::spectral::{Averaging, BinWidth, Tap};
use prs_core::{ModelConfig, PrSchedule, ScheduleKind};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DESK_PRESET: &str = include_str!("../../../configs/desk.toml");
pub const FULL_PRESET: &str = include_str!("../../../configs/full.toml");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetId {
    Cifar10,
    Cifar100,
    /// Generated class-conditional textures, for runs without CIFAR files.
    Synthetic,
}

impl DatasetId {
    pub fn classes(self) -> Option<usize> {
        match self {
            DatasetId::Cifar10 => Some(10),
            DatasetId::Cifar100 => Some(100),
            DatasetId::Synthetic => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(with = "kind_str")]
    pub kind: ScheduleKind,
    pub epochs: u32,
}

mod kind_str {
    use prs_core::ScheduleKind;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(k: &ScheduleKind, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(k)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<ScheduleKind, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    /// Floor of the cosine decay.
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_epochs: u32,
    pub cosine: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            min_lr: 1e-5,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_epochs: 5,
            cosine: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: DatasetId,
    /// Directory holding the CIFAR binary files.
    pub path: Option<PathBuf>,
    /// Stratified share of the training split.
    pub fraction: f64,
    /// Stratified share of the test split used for evaluation.
    pub eval_fraction: f64,
    /// Seed of the subset draw, independent of the training seed.
    pub subset_seed: u64,
    /// Per-channel mean/std normalisation after scaling to [0, 1].
    pub normalize: bool,
    pub synthetic_train: usize,
    pub synthetic_eval: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetId::Cifar10,
            path: None,
            fraction: 1.0,
            eval_fraction: 1.0,
            subset_seed: 0,
            normalize: true,
            synthetic_train: 512,
            synthetic_eval: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Zero padding for random crops; 0 disables cropping.
    pub crop_pad: usize,
    pub flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_pad: 4,
            flip: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub batch_size: usize,
    pub eval_batch: usize,
    pub label_smoothing: f64,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: u32,
    /// Size of the fixed, unaugmented batch used to measure loss continuity.
    pub probe_batch: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            eval_batch: 256,
            label_smoothing: 0.1,
            checkpoint_every: 0,
            probe_batch: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectralConfig {
    pub tap: Tap,
    /// Held-out images fed through the model for depth profiles.
    pub images: usize,
    pub bin_width: BinWidth,
    pub averaging: Averaging,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self {
            tap: Tap::PostResidual,
            images: 256,
            bin_width: BinWidth::Auto,
            averaging: Averaging::LogThenMean,
        }
    }
}

impl SpectralConfig {
    pub fn spectrum(&self) -> prs_core::spectral::SpectrumConfig {
        prs_core::spectral::SpectrumConfig {
            bin_width: self.bin_width,
            averaging: self.averaging,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub train: LoopConfig,
    #[serde(default)]
    pub spectral: SpectralConfig,
}

impl TrainConfig {
    pub fn preset(name: &str) -> Result<Self> {
        Self::parse(preset_text(name)?, &[])
    }

    pub fn from_file(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for (key, value) in overrides {
            set_dotted(&mut table, key, value)?;
        }
        let cfg: TrainConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.schedule()?;
        for (name, f) in [
            ("data.fraction", self.data.fraction),
            ("data.eval_fraction", self.data.eval_fraction),
        ] {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("{name} must lie in (0, 1], got {f}"));
            }
        }
        if let Some(c) = self.data.dataset.classes() {
            if c != self.model.classes {
                return bad(format!(
                    "dataset has {c} classes but model.classes = {}",
                    self.model.classes
                ));
            }
            if (
                self.model.image_height,
                self.model.image_width,
                self.model.in_channels,
            ) != (32, 32, 3)
            {
                return bad("CIFAR images are 32x32x3; set model.image_height/width/in_channels accordingly".into());
            }
        }
        if self.train.batch_size == 0 || self.train.eval_batch == 0 {
            return bad("train.batch_size and train.eval_batch must be positive".into());
        }
        if !(0.0..1.0).contains(&self.train.label_smoothing) {
            return bad(format!(
                "train.label_smoothing must lie in [0, 1), got {}",
                self.train.label_smoothing
            ));
        }
        let o = &self.optim;
        if !(o.lr >= 0.0 && o.min_lr >= 0.0 && o.weight_decay >= 0.0 && o.eps > 0.0) {
            return bad(
                "optimizer lr, min_lr and weight_decay must be non-negative, eps positive".into(),
            );
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return bad(format!(
                "optimizer betas must lie in [0, 1), got ({}, {})",
                o.beta1, o.beta2
            ));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<PrSchedule> {
        PrSchedule::new(self.schedule.epochs, self.model.depth, self.schedule.kind)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

pub fn preset_text(name: &str) -> Result<&'static str> {
    match name {
        "desk" => Ok(DESK_PRESET),
        "full" => Ok(FULL_PRESET),
        _ => Err(Error::Config(format!(
            "unknown preset {name:?} (expected desk or full)"
        ))),
    }
}

/// Splits `a.b=c` into its key and value.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    let k = k.trim();
    if k.is_empty() || k.split('.').any(str::is_empty) {
        return Err(Error::Config(format!(
            "override {s:?} has an empty key segment"
        )));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

fn literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {p} is not a section")))?;
    }
    cur.insert(last.to_string(), literal(raw));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse() {
        let desk = TrainConfig::preset("desk").unwrap();
        assert_eq!(
            (
                desk.model.dim,
                desk.model.depth,
                desk.model.kernel,
                desk.model.patch
            ),
            (64, 4, 3, 4)
        );
        assert_eq!(desk.schedule.epochs, 40);
        let t3 = TrainConfig::preset("full").unwrap();
        assert_eq!(
            (t3.model.dim, t3.model.depth, t3.schedule.epochs),
            (768, 6, 400)
        );
        assert_eq!(t3.model.classes, 100);
    }

    #[test]
    fn override_takes_precedence() {
        let ov = vec![
            parse_override("schedule.kind=all-conv").unwrap(),
            parse_override("model.dim = 32").unwrap(),
            parse_override("data.path=/tmp/x y").unwrap(),
        ];
        let c = TrainConfig::parse(DESK_PRESET, &ov).unwrap();
        assert_eq!(c.schedule.kind, ScheduleKind::AllConv);
        assert_eq!(c.model.dim, 32);
        assert_eq!(c.data.path.as_deref(), Some(Path::new("/tmp/x y")));
    }

    #[test]
    fn typos_and_bad_values_are_config_errors() {
        let ov = vec![parse_override("model.dimm=32").unwrap()];
        let e = TrainConfig::parse(DESK_PRESET, &ov)
            .unwrap_err()
            .to_string();
        assert!(e.contains("dimm"), "{e}");
        let ov = vec![parse_override("data.fraction=1.5").unwrap()];
        assert!(matches!(
            TrainConfig::parse(DESK_PRESET, &ov),
            Err(Error::Config(_))
        ));
        let ov = vec![parse_override("model.kernel=2").unwrap()];
        assert!(matches!(
            TrainConfig::parse(DESK_PRESET, &ov),
            Err(Error::Config(_))
        ));
        assert!(parse_override("nokey").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let c = TrainConfig::preset("desk").unwrap();
        assert_eq!(TrainConfig::parse(&c.to_toml(), &[]).unwrap(), c);
    }
}
