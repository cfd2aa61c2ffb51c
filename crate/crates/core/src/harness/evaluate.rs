//! Per-condition accuracy of a trained network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::harness::metrics::MetricsRow;
use crate::network::{argmax_rows, Network, NetworkSpec};
use crate::tasks::{mix_seed, Split, Task, BUCKETS};

/// Offset for train-split evaluation batches so they never coincide with
/// batches seen during training.
const EVAL_TRAIN_OFFSET: u64 = 1 << 40;
const TAG_EVAL_S: u64 = 0x6576_616c;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BucketStats {
    pub count: usize,
    pub correct: usize,
    pub loss_sum: f64,
}

impl BucketStats {
    pub fn accuracy(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.correct as f64 / self.count as f64
        }
    }

    pub fn mean_loss(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.loss_sum / self.count as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalTable {
    pub split: Split,
    /// One entry per condition decile.
    pub buckets: Vec<BucketStats>,
    pub total: BucketStats,
}

/// Identity columns shared by every row of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMeta {
    pub run_id: String,
    pub mode: String,
    pub manifold: String,
    pub sparsity: f64,
    pub seed: u64,
    pub epoch: usize,
}

impl RunMeta {
    pub fn row(&self, split: &str, bucket: String, loss: f64, accuracy: f64) -> MetricsRow {
        MetricsRow {
            run_id: self.run_id.clone(),
            mode: self.mode.clone(),
            manifold: self.manifold.clone(),
            sparsity: self.sparsity,
            seed: self.seed,
            epoch: self.epoch,
            split: split.into(),
            condition_bucket: bucket,
            loss,
            accuracy,
        }
    }
}

impl EvalTable {
    /// Bucket rows (empty buckets skipped) followed by the aggregate row.
    pub fn rows(&self, meta: &RunMeta) -> Vec<MetricsRow> {
        let split = self.split.as_str();
        let mut rows: Vec<MetricsRow> = self
            .buckets
            .iter()
            .enumerate()
            .filter(|(_, b)| b.count > 0)
            .map(|(i, b)| meta.row(split, i.to_string(), b.mean_loss(), b.accuracy()))
            .collect();
        rows.push(meta.row(split, "all".into(), self.total.mean_loss(), self.total.accuracy()));
        rows
    }
}

/// Errors naming every field where the network and the task disagree.
pub fn check_compatible(spec: &NetworkSpec, task: &Task) -> Result<()> {
    let mut diffs = Vec::new();
    let want = task.input_shape();
    if spec.input_shape != want {
        diffs.push(format!("input shape: network {:?}, task.dataset={} needs {:?}", spec.input_shape, task.spec().dataset, want));
    }
    let classes = spec.classes()?;
    if classes != task.classes() {
        diffs.push(format!("classes: network {classes}, task.dataset={} has {}", task.spec().dataset, task.classes()));
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(Error::config(format!("checkpoint does not fit the task: {}", diffs.join("; "))))
    }
}

/// Accuracy and cross-entropy per condition bucket over `samples` examples
/// drawn from `split`. With `random_s`, modulators fed to the network are
/// drawn uniformly from that seed instead of the task's values.
pub fn evaluate(
    net: &Network,
    task: &Task,
    split: Split,
    samples: usize,
    batch_size: usize,
    random_s: Option<u64>,
) -> Result<EvalTable> {
    check_compatible(net.spec(), task)?;
    let mut buckets = vec![BucketStats::default(); BUCKETS];
    let mut total = BucketStats::default();
    let offset = match split {
        Split::Train => EVAL_TRAIN_OFFSET,
        Split::Test => 0,
    };
    let mut done = 0;
    let mut index = 0u64;
    while done < samples {
        let size = batch_size.min(samples - done);
        let batch = task.batch(split, offset + index, size)?;
        let s_in = match random_s {
            Some(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, TAG_EVAL_S, index));
                (0..size).map(|_| rng.random_range(0.0..=1.0)).collect()
            }
            None => batch.s.clone(),
        };
        let mut g = Graph::new();
        let fp = net.forward(&mut g, &batch.inputs, Some(&s_in))?;
        let logits = g.value(fp.logits).clone();
        let pred = argmax_rows(&logits);
        let k = logits.shape()[1];
        for i in 0..size {
            let row = &logits.data()[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let loss = lse - row[batch.labels[i]];
            let hit = usize::from(pred[i] == batch.labels[i]);
            let b = &mut buckets[task.condition_bucket(batch.s[i])];
            for stat in [b, &mut total] {
                stat.count += 1;
                stat.correct += hit;
                stat.loss_sum += loss;
            }
        }
        done += size;
        index += 1;
    }
    Ok(EvalTable { split, buckets, total })
}
