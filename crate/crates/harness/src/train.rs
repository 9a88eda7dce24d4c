//! The training loop: scheduled switches at epoch boundaries, AdamW steps on
//! augmented batches, and evaluation after every epoch.
//!
//! Every epoch draws its shuffle and augmentation from its own ChaCha8
//! stream of the run seed, so a run resumed from a checkpoint replays the
//! remaining epochs exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use prs_core::nn::{MixerMode, Model};
use prs_core::{switch_block, Graph, PrSchedule, SwitchOutcome, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::Augment;
use crate::checkpoint;
use crate::config::{DatasetId, TrainConfig};
use crate::data::{self, load_cifar, CifarVariant, Dataset, Split};
use crate::error::{data_err, Error, Result};
use crate::metrics::{write_jsonl, EpochMetrics, EvalAccumulator, EvalMetrics, SwitchRecord};
use crate::optim::{AdamW, LrSchedule};

pub const CIFAR10_ENV: &str = "PRS_CIFAR10_DIR";
pub const CIFAR100_ENV: &str = "PRS_CIFAR100_DIR";

// stream 0 initialises the model; epoch t uses stream t
const INIT_STREAM: u64 = 0;

#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: Dataset,
    pub eval: Dataset,
}

/// Loads the configured train and eval sets. CIFAR directories come from
/// the dataset's environment variable when set, else from `data.path`.
pub fn load_datasets(cfg: &TrainConfig) -> Result<Datasets> {
    let d = &cfg.data;
    let m = &cfg.model;
    let variant = match d.dataset {
        DatasetId::Synthetic => {
            let make = |n, seed| {
                data::synthetic(
                    n,
                    m.classes,
                    m.image_height,
                    m.image_width,
                    m.in_channels,
                    seed,
                )
            };
            return Ok(Datasets {
                train: make(d.synthetic_train, d.subset_seed),
                eval: make(d.synthetic_eval, d.subset_seed.wrapping_add(1)),
            });
        }
        DatasetId::Cifar10 => CifarVariant::Cifar10,
        DatasetId::Cifar100 => CifarVariant::Cifar100,
    };
    let env = match variant {
        CifarVariant::Cifar10 => CIFAR10_ENV,
        CifarVariant::Cifar100 => CIFAR100_ENV,
    };
    let dir = data::resolve_dir(d.path.as_deref(), env).ok_or_else(|| {
        data_err(
            PathBuf::from(format!("${env}")),
            format!("no dataset directory: set data.path or {env}"),
        )
    })?;
    Ok(Datasets {
        train: load_cifar(&dir, variant, Split::Train, d.fraction, d.subset_seed)?,
        eval: load_cifar(&dir, variant, Split::Test, d.eval_fraction, d.subset_seed)?,
    })
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    pub optim: AdamW,
    /// Completed epochs.
    pub epoch: u32,
    /// Completed optimizer steps.
    pub step: u64,
    pub history: Vec<EpochMetrics>,
    pub switches: Vec<SwitchRecord>,
}

impl TrainState {
    /// Fresh model in the schedule's epoch-1 modes.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule()?;
        let mut rng = epoch_rng(config.seed, INIT_STREAM);
        let model = Model::new(config.model.clone(), &schedule.initial_modes(), &mut rng)?;
        Ok(Self {
            optim: AdamW::new(&config.optim),
            config,
            model,
            epoch: 0,
            step: 0,
            history: Vec::new(),
            switches: Vec::new(),
        })
    }

    pub fn schedule(&self) -> Result<PrSchedule> {
        self.config.schedule()
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.schedule.epochs
    }
}

pub fn epoch_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// The first `probe_batch` eval images, unaugmented.
pub fn probe_batch(cfg: &TrainConfig, eval: &Dataset) -> (Tensor, Vec<usize>) {
    let n = cfg.train.probe_batch.min(eval.len());
    let idx: Vec<usize> = (0..n).collect();
    eval.batch::<ChaCha8Rng>(&idx, None, cfg.data.normalize)
}

/// Training objective on a fixed batch, without recording gradients.
pub fn batch_loss(
    model: &Model,
    images: &Tensor,
    targets: &[usize],
    smoothing: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(images.clone())?;
    let out = model.forward(&mut g, x)?;
    let l = g.cross_entropy(out.logits, targets, smoothing as f32)?;
    Ok(g.scalar_f64(l))
}

/// Mean unsmoothed loss with top-1 and top-5 accuracy over `ds`.
pub fn evaluate(model: &Model, ds: &Dataset, batch: usize, normalize: bool) -> Result<EvalMetrics> {
    let classes = model.config.classes;
    if ds.classes != classes {
        return Err(Error::Config(format!(
            "eval set has {} classes, model has {classes}",
            ds.classes
        )));
    }
    if (ds.height, ds.width, ds.channels)
        != (
            model.config.image_height,
            model.config.image_width,
            model.config.in_channels,
        )
    {
        return Err(Error::Config(format!(
            "eval images are {}x{}x{}, model expects {}x{}x{}",
            ds.height,
            ds.width,
            ds.channels,
            model.config.image_height,
            model.config.image_width,
            model.config.in_channels
        )));
    }
    let mut acc = EvalAccumulator::default();
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = ds.batch::<ChaCha8Rng>(chunk, None, normalize);
        let mut g = Graph::new();
        let xv = g.constant(x)?;
        let out = model.forward(&mut g, xv)?;
        let l = g.cross_entropy(out.logits, &y, 0.0)?;
        acc.add(g.value(out.logits).data(), classes, &y, g.scalar_f64(l));
    }
    Ok(acc.finish())
}

/// Applies the switches scheduled for epoch `t`, rear-to-front, recording
/// the probe loss either side of each. Switched attention parameters start
/// with fresh optimizer moments; the frozen convolution's moments are dropped.
pub fn apply_switches(
    state: &mut TrainState,
    t: u32,
    probe: &(Tensor, Vec<usize>),
) -> Result<Vec<SwitchRecord>> {
    let schedule = state.schedule()?;
    let grid = state.model.grid();
    let beta = state.model.config.beta;
    let smoothing = state.config.train.label_smoothing;
    let mut out = Vec::new();
    for l in schedule.switches_at(t) {
        let before = batch_loss(&state.model, &probe.0, &probe.1, smoothing)?;
        match switch_block(&mut state.model.blocks[l - 1], grid, beta)? {
            SwitchOutcome::Switched => {}
            SwitchOutcome::AlreadyAttention => continue,
        }
        state
            .optim
            .forget_prefix(&format!("blocks.{}.conv.", l - 1));
        state
            .optim
            .forget_prefix(&format!("blocks.{}.attn.", l - 1));
        let after = batch_loss(&state.model, &probe.0, &probe.1, smoothing)?;
        out.push(SwitchRecord::new(t, l, before, after));
    }
    Ok(out)
}

pub fn steps_per_epoch(cfg: &TrainConfig, train_len: usize) -> u64 {
    train_len.div_ceil(cfg.train.batch_size) as u64
}

/// Runs epoch `state.epoch + 1`.
pub fn train_epoch(
    state: &mut TrainState,
    data: &Datasets,
    probe: &(Tensor, Vec<usize>),
) -> Result<EpochMetrics> {
    let started = Instant::now();
    let t = state.epoch + 1;
    let cfg = state.config.clone();
    if data.train.is_empty() {
        return Err(data_err("<train>", "training set is empty"));
    }
    if data.train.classes != cfg.model.classes {
        return Err(Error::Config(format!(
            "training set has {} classes, model has {}",
            data.train.classes, cfg.model.classes
        )));
    }
    let schedule = state.schedule()?;
    let records = apply_switches(state, t, probe)?;
    state.model.check_modes(&schedule, t)?;

    let spe = steps_per_epoch(&cfg, data.train.len());
    let lr_sched = LrSchedule::new(&cfg.optim, spe, cfg.schedule.epochs);
    let augment = Augment::new(cfg.augment.crop_pad, cfg.augment.flip);
    let mut rng = epoch_rng(cfg.seed, t as u64);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    order.shuffle(&mut rng);

    let (mut loss_sum, mut seen, mut lr) = (0.0, 0usize, 0.0);
    for chunk in order.chunks(cfg.train.batch_size) {
        let (x, y) = data
            .train
            .batch(chunk, Some((&augment, &mut rng)), cfg.data.normalize);
        let mut g = Graph::new();
        let xv = g.constant(x)?;
        let out = state.model.forward(&mut g, xv)?;
        let l = g.cross_entropy(out.logits, &y, cfg.train.label_smoothing as f32)?;
        let loss = g.scalar_f64(l);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch: t,
                step: state.step,
                loss,
            });
        }
        g.backward(l)?;
        let mut grads = BTreeMap::new();
        for (name, _) in g.params() {
            if let Some(gr) = g.param_grad(name)? {
                grads.insert(name.clone(), gr);
            }
        }
        lr = lr_sched.at(state.step);
        state.optim.step(&mut state.model, &grads, lr)?;
        state.step += 1;
        loss_sum += loss * y.len() as f64;
        seen += y.len();
    }

    let ev = evaluate(
        &state.model,
        &data.eval,
        cfg.train.eval_batch,
        cfg.data.normalize,
    )?;
    let m = EpochMetrics {
        epoch: t,
        train_loss: loss_sum / seen as f64,
        eval_loss: ev.loss,
        top1: ev.top1,
        top5: ev.top5,
        lr,
        wall_secs: started.elapsed().as_secs_f64(),
        modes: state.model.modes(),
        switched: records.iter().map(|r| r.layer).collect(),
    };
    state.switches.extend(records);
    state.history.push(m.clone());
    state.epoch = t;
    Ok(m)
}

/// Trains until the schedule's last epoch, calling `after_epoch` after each.
pub fn run(
    state: &mut TrainState,
    data: &Datasets,
    after_epoch: &mut dyn FnMut(&TrainState, &EpochMetrics) -> Result<()>,
) -> Result<()> {
    if data.eval.is_empty() {
        return Err(data_err("<eval>", "evaluation set is empty"));
    }
    let probe = probe_batch(&state.config, &data.eval);
    while !state.is_done() {
        let m = train_epoch(state, data, &probe)?;
        after_epoch(state, &m)?;
    }
    Ok(())
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SWITCHES_FILE: &str = "switches.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn epoch_checkpoint(dir: &Path, epoch: u32) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.ckpt"))
}

/// Newest checkpoint in `dir`: `final.ckpt`, else the highest-epoch one.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let fin = dir.join(FINAL_CHECKPOINT);
    if fin.is_file() {
        return Ok(Some(fin));
    }
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(u32, PathBuf)> = None;
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        let Some(name) = p.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(e) = name
            .strip_prefix("epoch_")
            .and_then(|s| s.strip_suffix(".ckpt"))
            .and_then(|s| s.parse::<u32>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| e > *b) {
            best = Some((e, p));
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Trains into `dir`, writing metrics after every epoch, periodic
/// checkpoints and `final.ckpt`. With `resume`, continues from the newest
/// checkpoint in `dir`, which must hold the same configuration.
pub fn train_to_dir(
    config: TrainConfig,
    data: &Datasets,
    dir: &Path,
    resume: bool,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainState> {
    std::fs::create_dir_all(dir)?;
    let mut state = match latest_checkpoint(dir)?.filter(|_| resume) {
        Some(path) => {
            let s = checkpoint::load(&path)?;
            if s.config != config {
                return Err(Error::Checkpoint {
                    path,
                    msg: "checkpoint was written with a different configuration".into(),
                });
            }
            s
        }
        None => TrainState::new(config)?,
    };
    let every = state.config.train.checkpoint_every;
    run(&mut state, data, &mut |s, m| {
        write_jsonl(&dir.join(METRICS_FILE), &s.history)?;
        write_jsonl(&dir.join(SWITCHES_FILE), &s.switches)?;
        if every > 0 && s.epoch % every == 0 && !s.is_done() {
            checkpoint::save(s, &epoch_checkpoint(dir, s.epoch))?;
        }
        on_epoch(m);
        Ok(())
    })?;
    write_jsonl(&dir.join(METRICS_FILE), &state.history)?;
    write_jsonl(&dir.join(SWITCHES_FILE), &state.switches)?;
    checkpoint::save(&state, &dir.join(FINAL_CHECKPOINT))?;
    Ok(state)
}

/// `(conv, sa)` block counts.
pub fn count_modes(modes: &[MixerMode]) -> (usize, usize) {
    let sa = modes
        .iter()
        .filter(|&&m| m == MixerMode::SelfAttention)
        .count();
    (modes.len() - sa, sa)
}
