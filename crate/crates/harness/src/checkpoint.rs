//! Training checkpoints: model and optimizer tensors plus a JSON header with
//! the configuration, block layouts, counters and history.

use std::collections::BTreeMap;
use std::path::Path;

use prs_core::nn::{BlockLayout, Model, Params};
use prs_core::{store, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::metrics::{EpochMetrics, SwitchRecord};
use crate::optim::{AdamW, Moments};
use crate::train::TrainState;

pub const CHECKPOINT_VERSION: u32 = 1;
const KIND: &str = "prs-checkpoint";

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    format_version: u32,
    config: TrainConfig,
    epoch: u32,
    step: u64,
    layouts: Vec<BlockLayout>,
    history: Vec<EpochMetrics>,
    switches: Vec<SwitchRecord>,
    optim_steps: BTreeMap<String, u64>,
}

fn ckpt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Writes `state` to `path` through a temporary file.
pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let header = Header {
        kind: KIND.into(),
        format_version: CHECKPOINT_VERSION,
        config: state.config.clone(),
        epoch: state.epoch,
        step: state.step,
        layouts: state.model.layouts(),
        history: state.history.clone(),
        switches: state.switches.clone(),
        optim_steps: state
            .optim
            .state()
            .iter()
            .map(|(k, m)| (k.clone(), m.step))
            .collect(),
    };
    let mut owned: Vec<(String, Tensor)> = Vec::new();
    state
        .model
        .visit("", &mut |name, t| owned.push((name.to_string(), t.clone())));
    for (name, m) in state.optim.state() {
        let n = m.m.len();
        owned.push((
            format!("optim.m.{name}"),
            Tensor::new(vec![n], m.m.clone())?,
        ));
        owned.push((
            format!("optim.v.{name}"),
            Tensor::new(vec![n], m.v.clone())?,
        ));
    }
    let refs: Vec<(&str, &Tensor)> = owned.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let tmp = path.with_extension("ckpt.tmp");
    store::write(&tmp, &serde_json::to_value(&header)?, &refs)
        .map_err(|e| ckpt_err(path, e.to_string()))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TrainState> {
    let file = store::read(path).map_err(|e| ckpt_err(path, e.to_string()))?;
    let kind = file.header.get("kind").and_then(|v| v.as_str());
    if kind != Some(KIND) {
        return Err(ckpt_err(path, "not a training checkpoint"));
    }
    let version = file.header.get("format_version").and_then(|v| v.as_u64());
    if version != Some(CHECKPOINT_VERSION as u64) {
        return Err(ckpt_err(
            path,
            format!("unsupported checkpoint version {version:?}, expected {CHECKPOINT_VERSION}"),
        ));
    }
    let header: Header = serde_json::from_value(file.header.clone())
        .map_err(|e| ckpt_err(path, format!("bad header: {e}")))?;
    header
        .config
        .validate()
        .map_err(|e| ckpt_err(path, format!("stored configuration is invalid: {e}")))?;
    let tensors: BTreeMap<String, Tensor> = file.tensors.into_iter().collect();
    let model = Model::from_tensors(header.config.model.clone(), &header.layouts, &tensors)
        .map_err(|e| ckpt_err(path, e.to_string()))?;

    let mut sizes = BTreeMap::new();
    model.visit("", &mut |name, t| {
        sizes.insert(name.to_string(), t.numel());
    });
    let mut optim = AdamW::new(&header.config.optim);
    for (name, &step) in &header.optim_steps {
        let &n = sizes.get(name).ok_or_else(|| {
            ckpt_err(
                path,
                format!("optimizer state for unknown parameter {name}"),
            )
        })?;
        let part = |which: &str| -> Result<Vec<f32>> {
            let key = format!("optim.{which}.{name}");
            let t = tensors
                .get(&key)
                .ok_or_else(|| ckpt_err(path, format!("missing tensor {key}")))?;
            if t.numel() != n {
                return Err(ckpt_err(
                    path,
                    format!("tensor {key} has {} values, parameter has {n}", t.numel()),
                ));
            }
            Ok(t.data().to_vec())
        };
        optim.insert(
            name.clone(),
            Moments {
                step,
                m: part("m")?,
                v: part("v")?,
            },
        );
    }
    Ok(TrainState {
        config: header.config,
        model,
        optim,
        epoch: header.epoch,
        step: header.step,
        history: header.history,
        switches: header.switches,
    })
}
