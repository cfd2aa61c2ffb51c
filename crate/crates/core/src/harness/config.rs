//! Flat `key=value` run configuration with dotted keys.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::manifold::ManifoldSpec;
use crate::network::{manifold_from_kv, ConditioningMode, LayerSpec, NetworkSpec};
use crate::optimizer::{Rule, DEFAULT_MOMENTUM};
use crate::tasks::{Dataset, TaskFamily, TaskSpec, ANGLE_GRID, DEFAULT_L2, DEFAULT_MAX_NOISE};

pub const KEYS: &[&str] = &[
    "data.seed",
    "eval.samples",
    "init.seed",
    "loss.l2",
    "manifold.kind",
    "manifold.n_basis",
    "manifold.periodic",
    "net.layers",
    "net.mode",
    "optim.lr",
    "optim.momentum",
    "optim.rule",
    "out.dir",
    "run.id",
    "task.dataset",
    "task.family",
    "task.grid",
    "task.max_noise",
    "task.sparsity",
    "train.batch_size",
    "train.batches_per_epoch",
    "train.epochs",
    "train.random_s",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub run_id: String,
    pub out_dir: PathBuf,
    /// Includes the data seed.
    pub task: TaskSpec,
    pub init_seed: u64,
    pub mode: ConditioningMode,
    pub layers: Vec<LayerSpec>,
    pub manifold: ManifoldSpec,
    pub rule: Rule,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    /// Draw `s` uniformly per example instead of using the task's value.
    pub random_s: bool,
    /// Weight of the s-scaled L2 penalty (manifold mode only).
    pub l2: f64,
    pub eval_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_kv(&BTreeMap::new()).expect("defaults are valid")
    }
}

/// Default layer list for a dataset.
pub fn default_layers(dataset: Dataset) -> Vec<LayerSpec> {
    let k = dataset.classes();
    let text = match dataset {
        Dataset::Blobs2d => format!("dense64,relu,dense64,relu,dense{k}"),
        Dataset::Digits16 => format!("conv8k3,relu,maxpool,conv16k3,relu,maxpool,flatten,dense64,relu,dense{k}"),
    };
    text.split(',').map(|t| t.parse().expect("default layer tokens parse")).collect()
}

fn parse_value<T: FromStr>(kv: &BTreeMap<String, String>, key: &str, default: T) -> Result<T>
where
    T::Err: Display,
{
    match kv.get(key) {
        Some(v) => v.trim().parse().map_err(|e| Error::config(format!("bad value '{v}' for {key}: {e}"))),
        None => Ok(default),
    }
}

impl RunConfig {
    /// Builds a config from explicit keys, filling in defaults. Unknown keys
    /// are rejected.
    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        if let Some(k) = kv.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(Error::config(format!("unknown config key '{k}'")));
        }
        let family: TaskFamily = parse_value(kv, "task.family", TaskFamily::Rotation)?;
        let dataset: Dataset = parse_value(kv, "task.dataset", Dataset::Blobs2d)?;
        let task = TaskSpec {
            family,
            dataset,
            sparsity: parse_value(kv, "task.sparsity", 1.0)?,
            grid: parse_value(kv, "task.grid", ANGLE_GRID)?,
            max_noise: parse_value(kv, "task.max_noise", DEFAULT_MAX_NOISE)?,
            seed: parse_value(kv, "data.seed", 0)?,
        };
        task.validate()?;
        let mode: ConditioningMode = parse_value(kv, "net.mode", ConditioningMode::Manifold)?;
        let layers = match kv.get("net.layers") {
            Some(v) => v.split(',').map(|t| t.trim().parse()).collect::<Result<Vec<LayerSpec>>>()?,
            None => default_layers(dataset),
        };
        let mut mkv = BTreeMap::new();
        mkv.insert("manifold.kind".to_string(), kv.get("manifold.kind").cloned().unwrap_or_else(|| "ellipse".into()));
        for k in ["manifold.n_basis", "manifold.periodic"] {
            if let Some(v) = kv.get(k) {
                mkv.insert(k.to_string(), v.clone());
            }
        }
        let manifold = manifold_from_kv(&mkv)?;
        let rule = match parse_value(kv, "optim.rule", "sgd_momentum".to_string())?.parse()? {
            Rule::SgdMomentum { .. } => Rule::SgdMomentum { momentum: parse_value(kv, "optim.momentum", DEFAULT_MOMENTUM)? },
            adam => adam,
        };
        let lr = parse_value(kv, "optim.lr", rule.default_lr())?;
        let l2_default = match family {
            TaskFamily::Noise if mode == ConditioningMode::Manifold => DEFAULT_L2,
            _ => 0.0,
        };
        let cfg = Self {
            run_id: parse_value(kv, "run.id", "run".to_string())?,
            out_dir: PathBuf::from(parse_value(kv, "out.dir", "out".to_string())?),
            task,
            init_seed: parse_value(kv, "init.seed", 0)?,
            mode,
            layers,
            manifold,
            rule,
            lr,
            epochs: parse_value(kv, "train.epochs", 30)?,
            batch_size: parse_value(kv, "train.batch_size", 64)?,
            batches_per_epoch: parse_value(kv, "train.batches_per_epoch", 50)?,
            random_s: parse_value(kv, "train.random_s", false)?,
            l2: parse_value(kv, "loss.l2", l2_default)?,
            eval_samples: parse_value(kv, "eval.samples", 3600)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.run_id.is_empty() || self.run_id.contains([',', '\n', '/']) {
            return Err(Error::config(format!("run.id '{}' must be non-empty without ',', '/' or newlines", self.run_id)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("optim.lr must be positive, got {}", self.lr)));
        }
        if let Rule::SgdMomentum { momentum } = self.rule {
            if !(0.0..1.0).contains(&momentum) {
                return Err(Error::config(format!("optim.momentum must lie in [0, 1), got {momentum}")));
            }
        }
        if self.batch_size == 0 || self.batches_per_epoch == 0 || self.eval_samples == 0 {
            return Err(Error::config("batch sizes and eval.samples must be positive"));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::config(format!("loss.l2 must be non-negative, got {}", self.l2)));
        }
        if self.l2 > 0.0 && self.mode != ConditioningMode::Manifold {
            return Err(Error::config("loss.l2 > 0 requires net.mode=manifold"));
        }
        let spec = self.network_spec();
        let classes = spec.classes()?;
        if classes != self.task.dataset.classes() {
            return Err(Error::config(format!(
                "net.layers ends with {classes} units but {} has {} classes",
                self.task.dataset,
                self.task.dataset.classes()
            )));
        }
        spec.param_shapes()?;
        Ok(())
    }

    pub fn network_spec(&self) -> NetworkSpec {
        NetworkSpec {
            input_shape: self.task.dataset.input_shape(),
            layers: self.layers.clone(),
            mode: self.mode,
            manifold: self.manifold,
        }
    }

    /// Every key with its resolved value.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            kv.insert(k.to_string(), v);
        };
        put("run.id", self.run_id.clone());
        put("out.dir", self.out_dir.display().to_string());
        put("task.family", self.task.family.to_string());
        put("task.dataset", self.task.dataset.to_string());
        put("task.sparsity", self.task.sparsity.to_string());
        put("task.grid", self.task.grid.to_string());
        put("task.max_noise", self.task.max_noise.to_string());
        put("data.seed", self.task.seed.to_string());
        put("init.seed", self.init_seed.to_string());
        put("net.mode", self.mode.to_string());
        put("net.layers", self.layers.iter().map(ToString::to_string).collect::<Vec<_>>().join(","));
        put("manifold.kind", self.manifold.kind().to_string());
        put("manifold.n_basis", self.manifold.n_basis().to_string());
        put("manifold.periodic", self.manifold.periodic().to_string());
        put("optim.rule", self.rule.to_string());
        put("optim.lr", self.lr.to_string());
        if let Rule::SgdMomentum { momentum } = self.rule {
            put("optim.momentum", momentum.to_string());
        }
        put("train.epochs", self.epochs.to_string());
        put("train.batch_size", self.batch_size.to_string());
        put("train.batches_per_epoch", self.batches_per_epoch.to_string());
        put("train.random_s", self.random_s.to_string());
        put("loss.l2", self.l2.to_string());
        put("eval.samples", self.eval_samples.to_string());
        kv
    }

    pub fn to_text(&self) -> String {
        self.to_kv().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Parses config text: one `key=value` per line, `#` comments.
    pub fn parse_text(text: &str) -> Result<BTreeMap<String, String>> {
        let mut kv = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value, got '{line}'", no + 1)))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(kv)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_kv(&Self::parse_text(text)?)
    }

    /// Loads an optional config file and applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut kv = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse_text(&text)?
            }
            None => BTreeMap::new(),
        };
        apply_overrides(&mut kv, overrides)?;
        Self::from_kv(&kv)
    }

    /// A copy with `key=value` overrides applied on top of the resolved keys.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut kv = self.to_kv();
        apply_overrides(&mut kv, overrides)?;
        Self::from_kv(&kv)
    }
}

pub fn apply_overrides(kv: &mut BTreeMap<String, String>, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override '{o}' is not key=value")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.rule, Rule::SgdMomentum { momentum: 0.9 });
    }

    #[test]
    fn overrides_and_round_trip() {
        let cfg = RunConfig::load(
            None,
            &[
                "task.dataset=digits16".into(),
                "task.family=noise".into(),
                "manifold.kind=line".into(),
                "optim.rule=adam".into(),
                "task.sparsity=0.1".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.lr, 2e-4);
        assert_eq!(cfg.l2, 1e-4);
        assert_eq!(cfg.layers, default_layers(Dataset::Digits16));
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::load(None, &["task.sparsity=0".into()]).is_err());
        assert!(RunConfig::load(None, &["nope.key=1".into()]).is_err());
        assert!(RunConfig::load(None, &["net.mode=concat".into(), "loss.l2=0.1".into()]).is_err());
        assert!(RunConfig::load(None, &["net.layers=dense8,relu,dense3".into()]).is_err());
        assert!(RunConfig::from_text("just words").is_err());
    }
}
