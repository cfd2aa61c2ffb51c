//! The training loop.

use std::fs;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::Result;
use crate::harness::config::RunConfig;
use crate::harness::evaluate::{evaluate, EvalTable, RunMeta};
use crate::harness::metrics::{MetricsRow, MetricsWriter, METRICS_HEADER};
use crate::network::checkpoint::{write_atomic, Checkpoint};
use crate::network::{argmax_rows, Network};
use crate::optimizer::OptimizerState;
use crate::tasks::{mix_seed, regularized_loss, Split, Task};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.txt";
pub const EVAL_FILE: &str = "eval.csv";

const TAG_TRAIN_S: u64 = 0x7261_6e64;

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: Network,
    pub rows: Vec<MetricsRow>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

pub fn run_meta(cfg: &RunConfig, epoch: usize) -> RunMeta {
    RunMeta {
        run_id: cfg.run_id.clone(),
        mode: cfg.mode.to_string(),
        manifold: cfg.network_spec().effective_manifold().kind().to_string(),
        sparsity: cfg.task.sparsity,
        seed: cfg.init_seed,
        epoch,
    }
}

/// Trains from scratch. Writes the resolved config, a header-first metrics
/// CSV with one train row per epoch, and a checkpoint after initialization
/// and after every epoch (atomically replaced, so a failure mid-run leaves
/// the last completed epoch on disk).
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let task = Task::new(cfg.task.clone())?;
    let mut net = Network::init(cfg.network_spec(), cfg.init_seed)?;
    fs::create_dir_all(&cfg.out_dir)?;
    write_atomic(&cfg.out_dir.join(CONFIG_FILE), cfg.to_text().as_bytes())?;
    let metrics_path = cfg.out_dir.join(METRICS_FILE);
    let checkpoint_path = cfg.out_dir.join(CHECKPOINT_FILE);
    let mut writer = MetricsWriter::create(&metrics_path, METRICS_HEADER)?;
    Checkpoint::new(net.clone(), cfg.init_seed).save(&checkpoint_path)?;

    let mut opt = OptimizerState::new(cfg.rule, cfg.lr, net.bundle())?;
    let imt = net.manifold().imt().clone();
    let mut rows = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for b in 0..cfg.batches_per_epoch {
            let index = ((epoch - 1) * cfg.batches_per_epoch + b) as u64;
            let batch = task.batch(Split::Train, index, cfg.batch_size)?;
            let s = if cfg.random_s {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.init_seed, TAG_TRAIN_S, index));
                (0..batch.len()).map(|_| rng.random_range(0.0..=1.0)).collect()
            } else {
                batch.s.clone()
            };
            let mut g = Graph::new();
            let fp = net.forward(&mut g, &batch.inputs, Some(&s))?;
            let loss = regularized_loss(&mut g, &net, &fp, &batch.labels, &s, cfg.l2)?;
            let grads = net.per_basis_gradients(&g, loss, &fp)?;
            let value = g.value(loss).item();
            opt.step(&imt, net.bundle_mut(), &grads, value)?;
            let pred = argmax_rows(g.value(fp.logits));
            correct += pred.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
            loss_sum += value * batch.len() as f64;
            seen += batch.len();
        }
        let row = run_meta(cfg, epoch).row(
            Split::Train.as_str(),
            "all".into(),
            loss_sum / seen as f64,
            correct as f64 / seen as f64,
        );
        writer.write_rows(std::slice::from_ref(&row))?;
        rows.push(row);
        Checkpoint::new(net.clone(), cfg.init_seed).save(&checkpoint_path)?;
    }
    Ok(TrainOutcome { network: net, rows, metrics_path, checkpoint_path })
}

/// Test-split evaluation of a trained network under `cfg`, written to
/// `eval.csv` in the run directory.
pub fn evaluate_run(cfg: &RunConfig, net: &Network) -> Result<EvalTable> {
    let task = Task::new(cfg.task.clone())?;
    let random_s = cfg.random_s.then_some(cfg.init_seed);
    let table = evaluate(net, &task, Split::Test, cfg.eval_samples, 500, random_s)?;
    let path = cfg.out_dir.join(EVAL_FILE);
    let mut writer = MetricsWriter::create(&path, METRICS_HEADER)?;
    writer.write_rows(&table.rows(&run_meta(cfg, cfg.epochs)))?;
    Ok(table)
}
