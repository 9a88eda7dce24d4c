#![allow(dead_code)]

use prs_core::ScheduleKind;
use prs_harness::{DatasetId, TrainConfig};

/// A few-second synthetic run: 8×8 images, 4×4 grid, two blocks.
pub fn tiny(kind: ScheduleKind, epochs: u32) -> TrainConfig {
    let mut c = TrainConfig::preset("desk").unwrap();
    c.seed = 7;
    c.model.image_height = 8;
    c.model.image_width = 8;
    c.model.patch = 2;
    c.model.dim = 8;
    c.model.depth = 2;
    c.model.mlp_ratio = 2;
    c.model.classes = 4;
    c.schedule.kind = kind;
    c.schedule.epochs = epochs;
    c.optim.warmup_epochs = 1;
    c.optim.lr = 2e-3;
    c.data.dataset = DatasetId::Synthetic;
    c.data.path = None;
    c.data.synthetic_train = 48;
    c.data.synthetic_eval = 24;
    c.augment.crop_pad = 1;
    c.train.batch_size = 16;
    c.train.eval_batch = 16;
    c.train.probe_batch = 8;
    c.train.checkpoint_every = 2;
    c.spectral.images = 24;
    c.validate().unwrap();
    c
}
