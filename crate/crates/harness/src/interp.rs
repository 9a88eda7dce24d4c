//! The interpolation experiment: the same model trained under uniform
//! schedules that spend `⌊T·k/6⌋` epochs in convolution for k = 6, 5, 3, 1,
//! followed by a depth profile of each final model.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use prs_core::schedule::scaled_interpolation_settings;
use prs_core::spectral::{depth_profile, DepthProfile};
use prs_core::ScheduleKind;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::metrics::EpochMetrics;
use crate::train::{train_to_dir, Datasets};

/// Index of the frequency π among the profile targets.
pub const NYQUIST: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettingResult {
    pub switch_epoch: u32,
    pub dir: PathBuf,
    pub top1: f64,
    /// Least-squares slope of Δ(π) against normalised depth.
    pub slope_pi: f64,
    pub profile: DepthProfile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpReport {
    pub seed: u64,
    pub epochs: u32,
    /// Most convolution first.
    pub settings: Vec<SettingResult>,
}

impl InterpReport {
    /// Whether the Δ(π) slope never rises from the most-convolutional
    /// setting to the most-attention one.
    pub fn slope_non_increasing(&self) -> bool {
        self.settings
            .windows(2)
            .all(|p| p[1].slope_pi <= p[0].slope_pi)
    }

    /// Rows `setting,switch_epoch,depth,f,delta_log_amp`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("setting,switch_epoch,depth,f,delta_log_amp\n");
        for (i, r) in self.settings.iter().enumerate() {
            for e in &r.profile.entries {
                for (f, d) in r.profile.targets.iter().zip(&e.delta) {
                    let _ = writeln!(s, "{i},{},{},{f},{d}", r.switch_epoch, e.depth);
                }
            }
        }
        s
    }
}

/// Majority vote of [`InterpReport::slope_non_increasing`].
pub fn trend_vote(reports: &[InterpReport]) -> bool {
    let yes = reports.iter().filter(|r| r.slope_non_increasing()).count();
    2 * yes > reports.len()
}

pub fn setting_dir(out: &Path, switch_epoch: u32) -> PathBuf {
    out.join(format!("conv_{switch_epoch:04}"))
}

/// Trains every setting of `base` (its seed and epoch count) under `out`.
/// With `resume`, settings whose `final.ckpt` exists are not retrained.
pub fn run_interpolation_suite(
    base: &TrainConfig,
    data: &Datasets,
    out: &Path,
    resume: bool,
    on_epoch: &mut dyn FnMut(u32, &EpochMetrics),
) -> Result<InterpReport> {
    let epochs = base.schedule.epochs;
    let schedules = scaled_interpolation_settings(epochs, base.model.depth)?;
    let n = base.spectral.images.min(data.eval.len());
    if n == 0 {
        return Err(Error::Config(
            "spectral.images must be positive with a non-empty eval set".into(),
        ));
    }
    let idx: Vec<usize> = (0..n).collect();
    let (images, _) = data
        .eval
        .batch::<ChaCha8Rng>(&idx, None, base.data.normalize);

    let mut settings = Vec::new();
    for schedule in schedules {
        let ScheduleKind::Uniform { switch_epoch } = schedule.kind() else {
            unreachable!("interpolation settings are uniform schedules")
        };
        let mut cfg = base.clone();
        cfg.schedule.kind = schedule.kind();
        let dir = setting_dir(out, switch_epoch);
        let state = train_to_dir(cfg, data, &dir, resume, &mut |m| on_epoch(switch_epoch, m))?;
        let profile = depth_profile(
            &state.model,
            &images,
            epochs,
            &schedule,
            &base.spectral.spectrum(),
            base.spectral.tap,
        )?;
        std::fs::write(dir.join("depth.csv"), profile.to_csv())?;
        let slope_pi = profile
            .slope(NYQUIST)
            .ok_or_else(|| Error::Config("depth slope needs at least two layers".into()))?;
        settings.push(SettingResult {
            switch_epoch,
            top1: state.history.last().map_or(0.0, |m| m.top1),
            dir,
            slope_pi,
            profile,
        });
    }
    let report = InterpReport {
        seed: base.seed,
        epochs,
        settings,
    };
    std::fs::write(out.join("interp.csv"), report.to_csv())?;
    std::fs::write(
        out.join("interp.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}
