//! Subcommand bodies. Exit codes: 0 success, 1 failed check or unexpected
//! error, 2 configuration, 3 data or checkpoint input, 4 divergence.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use prs_core::nn::{ConvMixer, GridShape, MixerMode, Model};
use prs_core::spectral::{depth_profile, DepthProfile, Tap};
use prs_core::{reparameterize, verify_equivalence, PrSchedule, Tensor};
use prs_harness::config::parse_override;
use prs_harness::data::{self, CifarVariant, Dataset, Split};
use prs_harness::interp::run_interpolation_suite;
use prs_harness::train::{count_modes, FINAL_CHECKPOINT, METRICS_FILE, SWITCHES_FILE};
use prs_harness::{checkpoint, load_datasets, train_to_dir, EpochMetrics, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::manifest::{new_run_dir, RunManifest};
use crate::{
    ConfigArgs, FourierArgs, InterpArgs, ReparamArgs, ScheduleArgs, TableFormat, TapArg, TrainArgs,
};

/// An error carrying its own exit code.
#[derive(Debug)]
pub struct Exit {
    pub code: u8,
    pub msg: String,
}

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for Exit {}

fn exit(code: u8, msg: impl Into<String>) -> anyhow::Error {
    Exit {
        code,
        msg: msg.into(),
    }
    .into()
}

fn core_code(e: &prs_core::Error) -> u8 {
    use prs_core::Error as E;
    match e {
        E::EvenKernel(_) | E::Geometry(_) | E::Schedule(_) | E::InvalidArgument { .. } => 2,
        E::Format(_) | E::Io(_) | E::Json(_) => 3,
        _ => 1,
    }
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    use prs_harness::Error as H;
    for cause in e.chain() {
        if let Some(x) = cause.downcast_ref::<Exit>() {
            return x.code;
        }
        if let Some(h) = cause.downcast_ref::<H>() {
            return match h {
                H::Config(_) => 2,
                H::Data { .. } | H::Checkpoint { .. } => 3,
                H::Divergence { .. } => 4,
                H::Core(c) => core_code(c),
                H::Io(_) | H::Json(_) => 1,
            };
        }
        if let Some(c) = cause.downcast_ref::<prs_core::Error>() {
            return core_code(c);
        }
    }
    1
}

fn resolve_config(
    args: &ConfigArgs,
    base: Option<&Path>,
    extra: Vec<(String, String)>,
) -> Result<TrainConfig> {
    let mut overrides = extra;
    for s in &args.overrides {
        overrides.push(parse_override(s)?);
    }
    let file = base.map(Path::to_path_buf).or_else(|| args.config.clone());
    Ok(match file {
        Some(p) => TrainConfig::from_file(&p, &overrides)?,
        None => TrainConfig::parse(prs_harness::config::preset_text(&args.preset)?, &overrides)?,
    })
}

/// Existing run directory for `--resume`, or a fresh one.
fn run_dir(resume: Option<&Path>, root: &Path, command: &str, seed: u64) -> Result<PathBuf> {
    match resume {
        Some(d) if d.is_dir() => Ok(d.to_path_buf()),
        Some(d) => Err(exit(
            3,
            format!("run directory {} does not exist", d.display()),
        )),
        None => new_run_dir(root, command, seed),
    }
}

/// Runs `work` inside a manifest: written as running first, then finalised.
fn with_manifest(
    dir: &Path,
    mut m: RunManifest,
    work: impl FnOnce(&mut RunManifest) -> Result<()>,
) -> Result<()> {
    m.write(dir)?;
    let res = work(&mut m);
    m.finish(dir, &res)?;
    res
}

fn eval_images(cfg: &TrainConfig, ds: &Dataset, n: usize) -> Result<Tensor> {
    let n = n.min(ds.len());
    if n == 0 {
        bail!(exit(3, "no evaluation images for the depth profile"));
    }
    let idx: Vec<usize> = (0..n).collect();
    Ok(ds.batch::<ChaCha8Rng>(&idx, None, cfg.data.normalize).0)
}

fn write_profile(dir: &Path, stem: &str, p: &DepthProfile, m: &mut RunManifest) -> Result<()> {
    fs::write(dir.join(format!("{stem}.csv")), p.to_csv())?;
    fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(p)?,
    )?;
    m.add_artifact(format!("{stem}.csv"));
    m.add_artifact(format!("{stem}.json"));
    Ok(())
}

fn progress(m: &EpochMetrics, total: u32) {
    let (c, s) = count_modes(&m.modes);
    let switched = if m.switched.is_empty() {
        String::new()
    } else {
        format!(" switched {:?}", m.switched)
    };
    eprintln!(
        "epoch {}/{total} train {:.4} eval {:.4} top1 {:.2} top5 {:.2} lr {:.2e} conv/sa {c}/{s}{switched} ({:.1}s)",
        m.epoch, m.train_loss, m.eval_loss, m.top1, m.top5, m.lr, m.wall_secs
    );
}

pub fn train(a: TrainArgs) -> Result<ExitCode> {
    let extra = a
        .schedule
        .iter()
        .map(|k| ("schedule.kind".to_string(), k.clone()))
        .collect();
    let base = a.resume.as_ref().map(|d| d.join("config.toml"));
    if let Some(b) = &base {
        if !b.is_file() {
            bail!(exit(
                3,
                format!(
                    "{} has no config.toml to resume from",
                    b.parent().unwrap().display()
                )
            ));
        }
    }
    let cfg = resolve_config(&a.cfg, base.as_deref(), extra)?;
    let dir = run_dir(a.resume.as_deref(), &a.cfg.out, "train", cfg.seed)?;
    eprintln!("run directory {}", dir.display());
    let manifest = RunManifest::new("train", cfg.seed, Some(serde_json::to_value(&cfg)?));
    with_manifest(&dir, manifest, |m| {
        m.settings.insert("tap".into(), json!(cfg.spectral.tap));
        fs::write(dir.join("config.toml"), cfg.to_toml())?;
        for f in ["config.toml", METRICS_FILE, SWITCHES_FILE, FINAL_CHECKPOINT] {
            m.add_artifact(f);
        }
        m.write(&dir)?;
        let data = load_datasets(&cfg)?;
        let total = cfg.schedule.epochs;
        let quiet = a.quiet;
        let state = train_to_dir(cfg.clone(), &data, &dir, a.resume.is_some(), &mut |e| {
            if !quiet {
                progress(e, total)
            }
        })?;
        let images = eval_images(&cfg, &data.eval, cfg.spectral.images)?;
        let schedule = cfg.schedule()?;
        let p = depth_profile(
            &state.model,
            &images,
            total,
            &schedule,
            &cfg.spectral.spectrum(),
            cfg.spectral.tap,
        )?;
        write_profile(&dir, "depth", &p, m)?;
        if let Some(last) = state.history.last() {
            eprintln!("final top1 {:.2} top5 {:.2}", last.top1, last.top5);
        }
        Ok(())
    })?;
    Ok(ExitCode::SUCCESS)
}

pub fn reparam_check(a: ReparamArgs) -> Result<ExitCode> {
    if a.grid == 0 || a.dim == 0 || a.samples == 0 {
        bail!(exit(2, "grid, dim and samples must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut conv = ConvMixer::random(a.kernel, a.dim, &mut rng)?;
    conv.bias = Tensor::randn(vec![a.dim], 0.5, &mut rng);
    let mut attn = reparameterize(&conv, GridShape::new(a.grid, a.grid), a.beta)?;
    if let Some(eps) = a.perturb {
        let noise = Tensor::randn(attn.w_o.shape().to_vec(), eps, &mut rng);
        for (w, n) in attn.w_o.data_mut().iter_mut().zip(noise.data()) {
            *w += n;
        }
    }
    let report = verify_equivalence(&conv, &attn, a.samples, a.tol, a.seed)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(if report.pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn fourier_data(spec: Option<&str>, cfg: &TrainConfig) -> Result<Dataset> {
    let Some(spec) = spec else {
        return Ok(load_datasets(cfg)?.eval);
    };
    if spec == "synthetic" {
        let mut c = cfg.clone();
        c.data.dataset = prs_harness::DatasetId::Synthetic;
        return Ok(load_datasets(&c)?.eval);
    }
    let (variant, dir) = match spec.split_once(':') {
        Some(("cifar10", d)) => (CifarVariant::Cifar10, d),
        Some(("cifar100", d)) => (CifarVariant::Cifar100, d),
        _ => bail!(exit(
            2,
            format!("--data {spec:?}: expected synthetic, cifar10:DIR or cifar100:DIR")
        )),
    };
    Ok(data::load_cifar(
        Path::new(dir),
        variant,
        Split::Test,
        cfg.data.eval_fraction,
        cfg.data.subset_seed,
    )?)
}

pub fn fourier(a: FourierArgs) -> Result<ExitCode> {
    let state = checkpoint::load(&a.checkpoint)?;
    let mut cfg = state.config.clone();
    if let Some(t) = a.tap {
        cfg.spectral.tap = match t {
            TapArg::PostResidual => Tap::PostResidual,
            TapArg::PreResidual => Tap::PreResidual,
        };
    }
    let model = &state.model;
    let grid = model.grid();
    if grid.height < 2 || grid.width < 2 {
        bail!(exit(
            2,
            format!(
                "model has a {}x{} token grid; the depth profile needs at least 2x2 tokens",
                grid.height, grid.width
            )
        ));
    }
    let dir = new_run_dir(&a.out, "fourier", cfg.seed)?;
    eprintln!("run directory {}", dir.display());
    let mut manifest = RunManifest::new("fourier", cfg.seed, Some(serde_json::to_value(&cfg)?));
    manifest
        .settings
        .insert("checkpoint".into(), json!(a.checkpoint));
    manifest
        .settings
        .insert("tap".into(), json!(cfg.spectral.tap));
    manifest.settings.insert("data".into(), json!(a.data));
    with_manifest(&dir, manifest, |m| {
        let ds = fourier_data(a.data.as_deref(), &cfg)?;
        check_geometry(model, &ds)?;
        let images = eval_images(&cfg, &ds, a.images.unwrap_or(cfg.spectral.images))?;
        m.settings.insert("images".into(), json!(images.shape()[0]));
        // the modes stored in the checkpoint are those of its last epoch
        let t = state.epoch.max(1);
        let schedule = cfg.schedule()?;
        let p = depth_profile(
            model,
            &images,
            t,
            &schedule,
            &cfg.spectral.spectrum(),
            cfg.spectral.tap,
        )?;
        write_profile(&dir, "depth", &p, m)?;
        print!("{}", p.to_csv());
        Ok(())
    })?;
    Ok(ExitCode::SUCCESS)
}

fn check_geometry(model: &Model, ds: &Dataset) -> Result<()> {
    let c = &model.config;
    if (ds.height, ds.width, ds.channels) != (c.image_height, c.image_width, c.in_channels) {
        bail!(exit(
            3,
            format!(
                "images are {}x{}x{} but the model expects {}x{}x{}",
                ds.height, ds.width, ds.channels, c.image_height, c.image_width, c.in_channels
            )
        ));
    }
    Ok(())
}

pub fn schedule(a: ScheduleArgs) -> Result<ExitCode> {
    let kind = a.kind.parse()?;
    let s = PrSchedule::new(a.epochs, a.layers, kind)?;
    let rows = s.switch_epochs();
    let from_start: Vec<usize> = (1..=a.layers)
        .filter(|&l| s.mode_at(1, l).ok() == Some(MixerMode::SelfAttention))
        .collect();
    let note = if from_start.len() == a.layers {
        Some("all layers SA from epoch 1".to_string())
    } else if !from_start.is_empty() {
        Some(format!("layers {from_start:?} SA from epoch 1"))
    } else if rows.is_empty() {
        Some("all layers stay conv".to_string())
    } else {
        None
    };
    match a.format {
        TableFormat::Csv => {
            println!("layer,switch_epoch");
            for r in &rows {
                println!("{},{}", r.layer, r.epoch);
            }
            if let Some(n) = &note {
                eprintln!("note: {n}");
            }
        }
        TableFormat::Json => {
            let v = json!({
                "epochs": a.epochs,
                "layers": a.layers,
                "kind": kind.to_string(),
                "switches": rows,
                "note": note,
            });
            println!("{}", serde_json::to_string_pretty(&v)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

pub fn interp(a: InterpArgs) -> Result<ExitCode> {
    let extra = a
        .epochs
        .iter()
        .map(|e| ("schedule.epochs".to_string(), e.to_string()))
        .collect();
    let base = a.resume.as_ref().map(|d| d.join("config.toml"));
    if let Some(b) = &base {
        if !b.is_file() {
            bail!(exit(
                3,
                format!(
                    "{} has no config.toml to resume from",
                    b.parent().unwrap().display()
                )
            ));
        }
    }
    let cfg = resolve_config(&a.cfg, base.as_deref(), extra)?;
    let dir = run_dir(a.resume.as_deref(), &a.cfg.out, "interp", cfg.seed)?;
    eprintln!("run directory {}", dir.display());
    let manifest = RunManifest::new("interp", cfg.seed, Some(serde_json::to_value(&cfg)?));
    with_manifest(&dir, manifest, |m| {
        fs::write(dir.join("config.toml"), cfg.to_toml())?;
        m.add_artifact("config.toml");
        m.add_artifact("interp.csv");
        m.add_artifact("interp.json");
        m.write(&dir)?;
        let data = load_datasets(&cfg)?;
        let total = cfg.schedule.epochs;
        let quiet = a.quiet;
        let report =
            run_interpolation_suite(&cfg, &data, &dir, a.resume.is_some(), &mut |e, ep| {
                if !quiet {
                    eprint!("[conv {e:>3}] ");
                    progress(ep, total);
                }
            })?;
        for s in &report.settings {
            let rel = s.dir.strip_prefix(&dir).unwrap_or(&s.dir).to_path_buf();
            m.add_artifact(rel.join(FINAL_CHECKPOINT));
            m.add_artifact(rel.join("depth.csv"));
            println!(
                "conv {:>3} / sa {:>3}: depth slope of Δ(π) {:+.4}, top1 {:.2}",
                s.switch_epoch,
                total - s.switch_epoch,
                s.slope_pi,
                s.top1
            );
        }
        println!(
            "slope non-increasing from most conv to most SA: {}",
            report.slope_non_increasing()
        );
        Ok(())
    })?;
    Ok(ExitCode::SUCCESS)
}
