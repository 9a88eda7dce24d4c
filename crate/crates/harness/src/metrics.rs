//! Per-epoch records, switch records and top-k accuracy.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use prs_core::nn::MixerMode;

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub train_loss: f64,
    pub eval_loss: f64,
    /// Eval accuracy in percent.
    pub top1: f64,
    pub top5: f64,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
    pub wall_secs: f64,
    pub modes: Vec<MixerMode>,
    /// 1-based layers that switched at the start of this epoch.
    pub switched: Vec<usize>,
}

impl EpochMetrics {
    /// Equality on everything except wall time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        Self {
            wall_secs: 0.0,
            ..self.clone()
        } == Self {
            wall_secs: 0.0,
            ..other.clone()
        }
    }
}

/// Loss on the fixed probe batch either side of one switch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchRecord {
    pub epoch: u32,
    pub layer: usize,
    pub loss_before: f64,
    pub loss_after: f64,
    pub rel_change: f64,
}

impl SwitchRecord {
    pub fn new(epoch: u32, layer: usize, loss_before: f64, loss_after: f64) -> Self {
        Self {
            epoch,
            layer,
            loss_before,
            loss_after,
            rel_change: (loss_after - loss_before).abs() / loss_before.abs(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean unsmoothed cross-entropy.
    pub loss: f64,
    /// Percent.
    pub top1: f64,
    pub top5: f64,
    pub samples: usize,
}

/// Whether `target` is among the `k` largest of `logits`. Ties rank the
/// lower class index first, so exactly `k` classes ever count as hits.
pub fn in_top_k(logits: &[f32], target: usize, k: usize) -> bool {
    let t = logits[target];
    let ahead = logits
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > t || (v == t && j < target))
        .count();
    ahead < k
}

/// Running sums for [`EvalMetrics`].
#[derive(Clone, Debug, Default)]
pub struct EvalAccumulator {
    loss_sum: f64,
    top1: usize,
    top5: usize,
    n: usize,
}

impl EvalAccumulator {
    /// Adds a batch whose mean loss is `mean_loss`; `logits` is row-major `[B, classes]`.
    pub fn add(&mut self, logits: &[f32], classes: usize, targets: &[usize], mean_loss: f64) {
        for (row, &t) in logits.chunks(classes).zip(targets) {
            self.top1 += usize::from(in_top_k(row, t, 1));
            self.top5 += usize::from(in_top_k(row, t, 5));
        }
        self.loss_sum += mean_loss * targets.len() as f64;
        self.n += targets.len();
    }

    pub fn finish(&self) -> EvalMetrics {
        let n = self.n.max(1) as f64;
        EvalMetrics {
            loss: self.loss_sum / n,
            top1: 100.0 * self.top1 as f64 / n,
            top5: 100.0 * self.top5 as f64 / n,
            samples: self.n,
        }
    }
}

/// Replaces `path` with one JSON line per record.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let tmp = path.with_extension("tmp");
    fs::File::create(&tmp)?.write_all(&buf)?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_favour_lower_index() {
        let z = [0.0f32; 10];
        let hits: Vec<bool> = (0..10).map(|t| in_top_k(&z, t, 5)).collect();
        assert_eq!(
            hits,
            [true, true, true, true, true, false, false, false, false, false]
        );
        assert!(in_top_k(&[1.0, 3.0, 2.0], 1, 1));
        assert!(!in_top_k(&[1.0, 3.0, 2.0], 2, 1));
        assert!(in_top_k(&[1.0, 3.0, 2.0], 2, 2));
    }

    #[test]
    fn accumulator_weights_batches_by_size() {
        let mut acc = EvalAccumulator::default();
        acc.add(&[1.0, 0.0, 0.0, 1.0], 2, &[0, 0], 1.0);
        acc.add(&[0.0, 1.0], 2, &[1], 4.0);
        let m = acc.finish();
        assert_eq!(m.samples, 3);
        assert!((m.loss - 2.0).abs() < 1e-12);
        assert!((m.top1 - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.top5, 100.0);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        let recs = vec![
            SwitchRecord::new(3, 2, 2.0, 2.0001),
            SwitchRecord::new(5, 1, 1.5, 1.5),
        ];
        write_jsonl(&p, &recs).unwrap();
        assert_eq!(read_jsonl::<SwitchRecord>(&p).unwrap(), recs);
    }
}
