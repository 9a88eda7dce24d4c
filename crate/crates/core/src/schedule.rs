//! Per-layer convolution to self-attention switch schedules.
//!
//! Epochs `t` run `1..=T` and layers `l` run `1..=L`. Under the linear
//! schedule layer `l` stays convolutional while `t ≤ T·(1 − l/(L+1))`, so the
//! rear layers switch first. The condition is evaluated once per epoch, before
//! its first batch.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::MixerMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScheduleKind {
    #[serde(rename = "prs")]
    PrsLinear,
    /// Every layer is convolutional for `t ≤ switch_epoch`.
    Uniform {
        switch_epoch: u32,
    },
    AllConv,
    AllSa,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleKind::PrsLinear => f.write_str("prs"),
            ScheduleKind::Uniform { switch_epoch } => write!(f, "uniform:{switch_epoch}"),
            ScheduleKind::AllConv => f.write_str("all-conv"),
            ScheduleKind::AllSa => f.write_str("all-sa"),
        }
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    /// `prs`, `all-conv`, `all-sa` or `uniform:<epoch>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prs" | "prs-linear" => Ok(ScheduleKind::PrsLinear),
            "all-conv" => Ok(ScheduleKind::AllConv),
            "all-sa" => Ok(ScheduleKind::AllSa),
            _ => {
                let e = s
                    .strip_prefix("uniform:")
                    .or_else(|| s.strip_prefix("uniform="))
                    .ok_or_else(|| Error::Schedule(format!("unknown schedule kind {s:?}")))?;
                let switch_epoch = e
                    .parse()
                    .map_err(|_| Error::Schedule(format!("bad uniform switch epoch {e:?}")))?;
                Ok(ScheduleKind::Uniform { switch_epoch })
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchEvent {
    pub layer: usize,
    /// First epoch the layer runs self-attention.
    pub epoch: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrSchedule {
    epochs: u32,
    layers: usize,
    kind: ScheduleKind,
}

impl PrSchedule {
    pub fn new(epochs: u32, layers: usize, kind: ScheduleKind) -> Result<Self> {
        if epochs == 0 {
            return Err(Error::Schedule("total epochs must be at least 1".into()));
        }
        if layers == 0 {
            return Err(Error::Schedule("layer count must be at least 1".into()));
        }
        if let ScheduleKind::Uniform { switch_epoch } = kind {
            if switch_epoch > epochs {
                return Err(Error::Schedule(format!(
                    "uniform switch epoch {switch_epoch} exceeds total epochs {epochs}"
                )));
            }
        }
        Ok(Self {
            epochs,
            layers,
            kind,
        })
    }

    pub fn prs(epochs: u32, layers: usize) -> Result<Self> {
        Self::new(epochs, layers, ScheduleKind::PrsLinear)
    }

    pub fn uniform(epochs: u32, layers: usize, switch_epoch: u32) -> Result<Self> {
        Self::new(epochs, layers, ScheduleKind::Uniform { switch_epoch })
    }

    pub fn epochs(&self) -> u32 {
        self.epochs
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    fn check(&self, t: u32, l: usize) -> Result<()> {
        if t == 0 || t > self.epochs {
            return Err(Error::Schedule(format!(
                "epoch {t} outside 1..={}",
                self.epochs
            )));
        }
        if l == 0 || l > self.layers {
            return Err(Error::Schedule(format!(
                "layer {l} outside 1..={}",
                self.layers
            )));
        }
        Ok(())
    }

    /// Mixer of layer `l` during epoch `t`.
    pub fn mode_at(&self, t: u32, l: usize) -> Result<MixerMode> {
        self.check(t, l)?;
        let conv = match self.kind {
            // t ≤ T·(L+1−l)/(L+1), kept in integers
            ScheduleKind::PrsLinear => {
                let big_l = self.layers as u64;
                t as u64 * (big_l + 1) <= self.epochs as u64 * (big_l + 1 - l as u64)
            }
            ScheduleKind::Uniform { switch_epoch } => t <= switch_epoch,
            ScheduleKind::AllConv => true,
            ScheduleKind::AllSa => false,
        };
        Ok(if conv {
            MixerMode::Conv
        } else {
            MixerMode::SelfAttention
        })
    }

    /// First epoch in which layer `l` is self-attention, if any.
    pub fn first_sa_epoch(&self, l: usize) -> Result<Option<u32>> {
        self.check(1, l)?;
        let e = match self.kind {
            ScheduleKind::PrsLinear => {
                let big_l = self.layers as u64;
                (self.epochs as u64 * (big_l + 1 - l as u64) / (big_l + 1)) as u32 + 1
            }
            ScheduleKind::Uniform { switch_epoch } => switch_epoch + 1,
            ScheduleKind::AllConv => return Ok(None),
            ScheduleKind::AllSa => 1,
        };
        Ok((e <= self.epochs).then_some(e))
    }

    /// Layers that start training in each mode.
    pub fn initial_modes(&self) -> Vec<MixerMode> {
        (1..=self.layers)
            .map(|l| self.mode_at(1, l).expect("in range"))
            .collect()
    }

    /// Conv to SA transitions that happen during training, ascending by
    /// epoch and rear-to-front within an epoch. Layers that are already
    /// attention at epoch 1 do not appear.
    pub fn switch_epochs(&self) -> Vec<SwitchEvent> {
        let mut out: Vec<SwitchEvent> = (1..=self.layers)
            .filter_map(|l| {
                let e = self.first_sa_epoch(l).expect("in range")?;
                (e >= 2).then_some(SwitchEvent { layer: l, epoch: e })
            })
            .collect();
        out.sort_by(|a, b| a.epoch.cmp(&b.epoch).then(b.layer.cmp(&a.layer)));
        out
    }

    /// Layers that switch at the start of epoch `t`, rear-to-front.
    pub fn switches_at(&self, t: u32) -> Vec<usize> {
        self.switch_epochs()
            .into_iter()
            .filter(|e| e.epoch == t)
            .map(|e| e.layer)
            .collect()
    }
}

/// The four uniform-switch settings over 300 epochs: convolution for
/// 300, 250, 150 and 50 epochs.
pub fn interpolation_settings(layers: usize) -> Result<Vec<PrSchedule>> {
    [300, 250, 150, 50]
        .into_iter()
        .map(|e| PrSchedule::uniform(300, layers, e))
        .collect()
}

/// The same four conv/SA splits rescaled to `epochs` total epochs
/// (`⌊epochs·k/6⌋` convolution epochs for k = 6, 5, 3, 1).
pub fn scaled_interpolation_settings(epochs: u32, layers: usize) -> Result<Vec<PrSchedule>> {
    [6u32, 5, 3, 1]
        .into_iter()
        .map(|k| PrSchedule::uniform(epochs, layers, epochs * k / 6))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_table_for_six_layers() {
        let s = PrSchedule::prs(400, 6).unwrap();
        let ev = s.switch_epochs();
        let got: Vec<(usize, u32)> = ev.iter().map(|e| (e.layer, e.epoch)).collect();
        assert_eq!(
            got,
            vec![(6, 58), (5, 115), (4, 172), (3, 229), (2, 286), (1, 343)]
        );
        for l in 1..=6 {
            assert_eq!(s.mode_at(1, l).unwrap(), MixerMode::Conv);
            assert_eq!(s.mode_at(400, l).unwrap(), MixerMode::SelfAttention);
            let e = s.first_sa_epoch(l).unwrap().unwrap();
            assert_eq!(s.mode_at(e - 1, l).unwrap(), MixerMode::Conv);
            assert_eq!(s.mode_at(e, l).unwrap(), MixerMode::SelfAttention);
        }
    }

    #[test]
    fn uniform_switches_all_layers_together() {
        let s = PrSchedule::uniform(300, 4, 250).unwrap();
        let ev = s.switch_epochs();
        assert_eq!(ev.len(), 4);
        assert!(ev.iter().all(|e| e.epoch == 251));
        assert_eq!(s.switches_at(251), vec![4, 3, 2, 1]);
        assert!(PrSchedule::uniform(300, 4, 300)
            .unwrap()
            .switch_epochs()
            .is_empty());
    }

    #[test]
    fn constant_kinds() {
        assert!(PrSchedule::new(10, 3, ScheduleKind::AllConv)
            .unwrap()
            .switch_epochs()
            .is_empty());
        let sa = PrSchedule::new(10, 3, ScheduleKind::AllSa).unwrap();
        assert!(sa.switch_epochs().is_empty());
        assert!(sa
            .initial_modes()
            .iter()
            .all(|&m| m == MixerMode::SelfAttention));
    }

    #[test]
    fn range_errors() {
        let s = PrSchedule::prs(10, 3).unwrap();
        assert!(s.mode_at(0, 1).is_err());
        assert!(s.mode_at(11, 1).is_err());
        assert!(s.mode_at(1, 4).is_err());
        assert!(PrSchedule::prs(10, 0).is_err());
        assert!(PrSchedule::uniform(10, 2, 11).is_err());
    }

    #[test]
    fn interpolation_splits() {
        let e: Vec<_> = interpolation_settings(4)
            .unwrap()
            .iter()
            .map(|s| s.kind())
            .collect();
        assert_eq!(
            e,
            [300, 250, 150, 50].map(|switch_epoch| ScheduleKind::Uniform { switch_epoch })
        );
        let e: Vec<_> = scaled_interpolation_settings(30, 4)
            .unwrap()
            .iter()
            .map(|s| s.kind())
            .collect();
        assert_eq!(
            e,
            [30, 25, 15, 5].map(|switch_epoch| ScheduleKind::Uniform { switch_epoch })
        );
    }

    #[test]
    fn kind_parses() {
        for k in [
            ScheduleKind::PrsLinear,
            ScheduleKind::AllConv,
            ScheduleKind::AllSa,
            ScheduleKind::Uniform { switch_epoch: 25 },
        ] {
            assert_eq!(k.to_string().parse::<ScheduleKind>().unwrap(), k);
        }
        assert!("nope".parse::<ScheduleKind>().is_err());
    }
}
