//! Cross-product sweep over sparsity, conditioning mode and seed.
//!
//! Runs execute on up to `jobs` worker threads, each run single-threaded and
//! fully independent. Results are merged in plan order, so the combined CSV
//! does not depend on scheduling.

use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::evaluate::EvalTable;
use crate::harness::metrics::{MetricsWriter, METRICS_HEADER};
use crate::harness::train::{evaluate_run, run_meta, train};
use crate::network::ConditioningMode;

pub const SWEEP_FILE: &str = "sweep.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPlan {
    pub base: RunConfig,
    pub sparsities: Vec<f64>,
    pub modes: Vec<ConditioningMode>,
    pub seeds: Vec<u64>,
    pub jobs: usize,
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub config: RunConfig,
    pub result: std::result::Result<EvalTable, String>,
}

impl SweepRow {
    pub fn accuracy(&self) -> Option<f64> {
        self.result.as_ref().ok().map(|t| t.total.accuracy())
    }

    pub fn to_csv(&self) -> String {
        let meta = run_meta(&self.config, self.config.epochs);
        match &self.result {
            Ok(t) => format!("{},ok", meta.row("test", "all".into(), t.total.mean_loss(), t.total.accuracy()).to_csv()),
            Err(_) => format!("{},failed", meta.row("test", "all".into(), f64::NAN, f64::NAN).to_csv()),
        }
    }
}

impl SweepPlan {
    /// One config per `(sparsity, mode, seed)`, sparsity-major. Each seed is
    /// both the data seed and the init seed, so all modes at a seed see the
    /// same data.
    pub fn configs(&self) -> Result<Vec<RunConfig>> {
        if self.sparsities.is_empty() || self.modes.is_empty() || self.seeds.is_empty() {
            return Err(Error::config("sweep needs at least one sparsity, mode and seed"));
        }
        let mut out = Vec::new();
        for &p in &self.sparsities {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::config(format!("sweep sparsity {p} outside (0, 1]")));
            }
            for &mode in &self.modes {
                for &seed in &self.seeds {
                    let id = format!("{mode}-p{p}-s{seed}");
                    let mut cfg = self.base.clone();
                    cfg.run_id = id.clone();
                    cfg.out_dir = self.base.out_dir.join("runs").join(&id);
                    cfg.task.sparsity = p;
                    cfg.task.seed = seed;
                    cfg.init_seed = seed;
                    cfg.mode = mode;
                    if mode != ConditioningMode::Manifold {
                        cfg.l2 = 0.0;
                    }
                    cfg.validate()?;
                    out.push(cfg);
                }
            }
        }
        Ok(out)
    }

    pub fn sweep_path(&self) -> PathBuf {
        self.base.out_dir.join(SWEEP_FILE)
    }
}

fn run_one(cfg: &RunConfig) -> std::result::Result<EvalTable, String> {
    let outcome = train(cfg).map_err(|e| e.to_string())?;
    evaluate_run(cfg, &outcome.network).map_err(|e| e.to_string())
}

/// Runs every configuration and writes the merged CSV: the metrics columns
/// plus `status`, one test-aggregate row per run. Failed runs are recorded
/// and the sweep carries on.
pub fn sweep(plan: &SweepPlan) -> Result<Vec<SweepRow>> {
    let configs = plan.configs()?;
    fs::create_dir_all(&plan.base.out_dir)?;
    let slots: Vec<Mutex<Option<SweepRow>>> = configs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let jobs = plan.jobs.clamp(1, configs.len());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cfg) = configs.get(i) else { break };
                let result = run_one(cfg);
                *slots[i].lock().expect("slot lock") = Some(SweepRow { config: cfg.clone(), result });
            });
        }
    });
    let rows: Vec<SweepRow> =
        slots.into_iter().map(|m| m.into_inner().expect("slot lock").expect("every run reports")).collect();

    let mut writer = MetricsWriter::create(&plan.sweep_path(), &format!("{METRICS_HEADER},status"))?;
    let mut errors = String::new();
    for r in &rows {
        writer.write_line(&r.to_csv())?;
        if let Err(e) = &r.result {
            errors.push_str(&format!("{}: {e}\n", r.config.run_id));
        }
    }
    writer.flush()?;
    if !errors.is_empty() {
        fs::write(plan.base.out_dir.join("sweep_errors.txt"), errors)?;
    }
    Ok(rows)
}
