use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wmanifold::harness::config::RunConfig;
use wmanifold::harness::evaluate::evaluate;
use wmanifold::harness::metrics::{MetricsWriter, METRICS_HEADER};
use wmanifold::harness::train::{run_meta, train, EVAL_FILE};
use wmanifold::harness::{sweep, SweepPlan};
use wmanifold::oracle::verify::{self, VerifyOptions};
use wmanifold::{Checkpoint, ConditioningMode, Error, Split, Task};

#[derive(Parser)]
#[command(name = "wmanifold", version, about = "Train and check weight-manifold networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `key=value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (same as `--set out.dir=…`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Data and init seed (same as setting both `data.seed` and `init.seed`).
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> wmanifold::Result<RunConfig> {
        let mut overrides = self.set.clone();
        if let Some(out) = &self.out {
            overrides.push(format!("out.dir={}", out.display()));
        }
        if let Some(seed) = self.seed {
            overrides.push(format!("data.seed={seed}"));
            overrides.push(format!("init.seed={seed}"));
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one network and write its checkpoint and metrics.
    Train(Common),
    /// Per-condition accuracy of a checkpoint on the configured task.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `test` (full condition grid) or `train` (training conditions only).
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train and evaluate every (sparsity, mode, seed) combination.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.25,0.5,1.0")]
        sparsities: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "manifold,concat,embed,none")]
        modes: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        /// Parallel runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run every oracle check.
    Verify {
        /// Also write the JSON report here.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Add this value to a metric-inverse entry before checking.
        #[arg(long, hide = true, default_value_t = 0.0)]
        inject_imt_fault: f64,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> wmanifold::Result<ExitCode> {
    match command {
        Command::Train(common) => {
            let cfg = common.load()?;
            let outcome = train(&cfg)?;
            match outcome.rows.last() {
                Some(r) => println!("epoch {}: loss {:.4}, train accuracy {:.4}", r.epoch, r.loss, r.accuracy),
                None => println!("no epochs run; checkpoint holds the initialization"),
            }
            println!("metrics: {}", outcome.metrics_path.display());
            println!("checkpoint: {}", outcome.checkpoint_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Evaluate { common, checkpoint, split } => {
            let cfg = common.load()?;
            let split = match split.as_str() {
                "test" => Split::Test,
                "train" => Split::Train,
                other => return Err(Error::config(format!("--split must be test or train, got '{other}'"))),
            };
            let ck = Checkpoint::load(&checkpoint)?;
            let task = Task::new(cfg.task.clone())?;
            let random_s = cfg.random_s.then_some(ck.seed);
            let table = evaluate(&ck.network, &task, split, cfg.eval_samples, 500, random_s)?;
            let mut meta = run_meta(&cfg, cfg.epochs);
            meta.mode = ck.network.spec().mode.to_string();
            meta.manifold = ck.network.spec().effective_manifold().kind().to_string();
            meta.seed = ck.seed;
            let rows = table.rows(&meta);
            println!("{:<8} {:>7} {:>9} {:>9}", "bucket", "count", "loss", "accuracy");
            for (i, b) in table.buckets.iter().enumerate().filter(|(_, b)| b.count > 0) {
                println!("{i:<8} {:>7} {:>9.4} {:>9.4}", b.count, b.mean_loss(), b.accuracy());
            }
            let t = &table.total;
            println!("{:<8} {:>7} {:>9.4} {:>9.4}", "all", t.count, t.mean_loss(), t.accuracy());
            fs::create_dir_all(&cfg.out_dir)?;
            let path = cfg.out_dir.join(EVAL_FILE);
            MetricsWriter::create(&path, METRICS_HEADER)?.write_rows(&rows)?;
            println!("wrote {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { common, sparsities, modes, seeds, jobs } => {
            let base = common.load()?;
            let modes = modes.iter().map(|m| m.parse()).collect::<wmanifold::Result<Vec<ConditioningMode>>>()?;
            let plan = SweepPlan { base, sparsities, modes, seeds, jobs };
            let rows = sweep(&plan)?;
            let failed = rows.iter().filter(|r| r.result.is_err()).count();
            println!("{} runs, {failed} failed; merged results in {}", rows.len(), plan.sweep_path().display());
            Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Verify { json, inject_imt_fault } => {
            let opts = VerifyOptions { imt_perturbation: inject_imt_fault, ..VerifyOptions::default() };
            let report = verify::run(&opts)?;
            println!("{report}");
            if let Some(path) = json {
                write_json(&path, &report.to_json())?;
            }
            Ok(if report.pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
    }
}

fn write_json(path: &Path, text: &str) -> wmanifold::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}
