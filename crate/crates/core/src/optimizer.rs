//! First-order update rules applied to metric-rescaled basis gradients.
//!
//! Each step first multiplies the per-basis gradients by the cached inverse
//! integrated metric, then feeds the result to SGD with momentum or Adam.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{BasisBundle, ImtMatrix, ManifoldSpec};
use crate::oracle;

pub const DEFAULT_SGD_LR: f64 = 0.01;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_ADAM_LR: f64 = 2e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Rule {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Rule {
    pub fn adam() -> Self {
        Rule::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Rule::SgdMomentum { .. } => "sgd_momentum",
            Rule::Adam { .. } => "adam",
        }
    }

    pub fn default_lr(&self) -> f64 {
        match self {
            Rule::SgdMomentum { .. } => DEFAULT_SGD_LR,
            Rule::Adam { .. } => DEFAULT_ADAM_LR,
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Rule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd_momentum" | "sgd" => Ok(Rule::SgdMomentum { momentum: DEFAULT_MOMENTUM }),
            "adam" => Ok(Rule::adam()),
            other => Err(Error::config(format!("unknown optimizer rule '{other}'"))),
        }
    }
}

/// Per-step diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UpdateReport {
    pub step: u64,
    pub loss: f64,
    /// `‖g_k‖` over all parameters, per basis index.
    pub grad_norms: Vec<f64>,
    /// `‖(Cg)_k‖` over all parameters, per basis index.
    pub rescaled_norms: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    rule: Rule,
    lr: f64,
    first: BasisBundle,
    second: Option<BasisBundle>,
    steps: u64,
}

impl OptimizerState {
    /// Zero buffers shaped like `like`.
    pub fn new(rule: Rule, lr: f64, like: &BasisBundle) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        match rule {
            Rule::SgdMomentum { momentum } if !(0.0..1.0).contains(&momentum) => {
                return Err(Error::config(format!("momentum must lie in [0, 1), got {momentum}")));
            }
            Rule::Adam { beta1, beta2, eps }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 =>
            {
                return Err(Error::config("adam needs betas in [0, 1) and eps > 0"));
            }
            _ => {}
        }
        let second = matches!(rule, Rule::Adam { .. }).then(|| like.zeros_like());
        Ok(Self { rule, lr, first: like.zeros_like(), second, steps: 0 })
    }

    pub fn sgd(lr: f64, momentum: f64, like: &BasisBundle) -> Result<Self> {
        Self::new(Rule::SgdMomentum { momentum }, lr, like)
    }

    pub fn rule(&self) -> Rule {
        self.rule
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Momentum (SGD) or first-moment (Adam) buffers.
    pub fn velocity(&self) -> &BasisBundle {
        &self.first
    }

    /// One update of `bundle` in place.
    pub fn step(&mut self, imt: &ImtMatrix, bundle: &mut BasisBundle, grads: &BasisBundle, loss: f64) -> Result<UpdateReport> {
        bundle.check_same_structure(grads)?;
        bundle.check_same_structure(&self.first)?;
        if imt.n() != bundle.n_basis() {
            return Err(Error::contract(format!(
                "metric is {0}x{0} but bundle has {1} basis points",
                imt.n(),
                bundle.n_basis()
            )));
        }
        for e in grads.entries() {
            for (k, g) in e.points.iter().enumerate() {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of {} at basis {k}", e.name)));
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("batch loss {loss}")));
        }
        let rescaled = imt.rescale_bundle(grads)?;
        let grad_norms = basis_norms(grads);
        let rescaled_norms = basis_norms(&rescaled);

        self.steps += 1;
        let t = self.steps as i32;
        for (pi, (p_entry, r_entry)) in bundle.entries_mut().iter_mut().zip(rescaled.entries()).enumerate() {
            for (k, (p, r)) in p_entry.points.iter_mut().zip(&r_entry.points).enumerate() {
                if imt.is_frozen(k) {
                    continue;
                }
                let v = &mut self.first.entries_mut()[pi].points[k];
                match self.rule {
                    Rule::SgdMomentum { momentum } => {
                        for ((pv, vv), rv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(r.data()) {
                            *vv = momentum * *vv + rv;
                            *pv -= self.lr * *vv;
                        }
                    }
                    Rule::Adam { beta1, beta2, eps } => {
                        let m2 = &mut self.second.as_mut().expect("adam keeps second moments").entries_mut()[pi].points[k];
                        let c1 = 1.0 - beta1.powi(t);
                        let c2 = 1.0 - beta2.powi(t);
                        for (((pv, mv), sv), rv) in
                            p.data_mut().iter_mut().zip(v.data_mut()).zip(m2.data_mut()).zip(r.data())
                        {
                            *mv = beta1 * *mv + (1.0 - beta1) * rv;
                            *sv = beta2 * *sv + (1.0 - beta2) * rv * rv;
                            *pv -= self.lr * (*mv / c1) / ((*sv / c2).sqrt() + eps);
                        }
                    }
                }
            }
        }
        Ok(UpdateReport { step: self.steps, loss, grad_norms, rescaled_norms })
    }
}

fn basis_norms(bundle: &BasisBundle) -> Vec<f64> {
    let mut sq = vec![0.0; bundle.n_basis()];
    for e in bundle.entries() {
        for (acc, p) in sq.iter_mut().zip(&e.points) {
            *acc += p.norm_sq();
        }
    }
    sq.into_iter().map(f64::sqrt).collect()
}

/// Outcome of [`kkt_optimality_check`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KktReport {
    pub passed: bool,
    /// Smallest `(m' − m) / m` over all perturbations, where `m` is the
    /// volumetric movement of the candidate update.
    pub margin: f64,
    pub trials: usize,
}

/// Slack allowed on the relative movement margin.
pub const KKT_SLACK: f64 = -1e-9;

/// Checks that `delta` moves the manifold least among updates with the same
/// first-order descent `⟨ḡ, ΔP⟩`.
///
/// Perturbations are drawn from two families: isotropic Gaussian directions,
/// and `delta` plus Gaussian noise at scales from `1e-3` to `1` (relative).
/// Each is rescaled to match the descent of `delta`. Frozen basis points are
/// never perturbed.
pub fn kkt_optimality_check(
    spec: &ManifoldSpec,
    grads: &BasisBundle,
    delta: &BasisBundle,
    trials: usize,
    seed: u64,
) -> Result<KktReport> {
    grads.check_arity(spec)?;
    grads.check_same_structure(delta)?;
    let frozen = crate::manifold::integrated_metric_inverse(spec)?.frozen().to_vec();
    let g = grads.flatten();
    let d = delta.flatten();
    let dim = grads.point_dim();
    let descent = dot(&g, &d);
    let base = oracle::volumetric_movement(spec, delta)?;
    if base == 0.0 {
        return Ok(KktReport { passed: descent == 0.0, margin: 0.0, trials: 0 });
    }
    let scale = dot(&d, &d).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut margin = f64::INFINITY;
    let mut done = 0;
    while done < trials {
        let local = if done % 2 == 0 { 1.0 } else { 10f64.powf(rng.random_range(-3.0..0.0)) };
        let mut q: Vec<f64> = (0..d.len())
            .map(|i| {
                let noise: f64 = rng.sample(StandardNormal);
                let k = i / dim;
                if frozen[k] {
                    0.0
                } else if done % 2 == 0 {
                    noise
                } else {
                    d[i] + local * scale * noise / (d.len() as f64).sqrt()
                }
            })
            .collect();
        let qd = dot(&g, &q);
        if qd.abs() < 1e-12 * descent.abs() {
            continue;
        }
        let alpha = descent / qd;
        q.iter_mut().for_each(|v| *v *= alpha);
        let moved = oracle::volumetric_movement(spec, &delta.unflatten_like(&q)?)?;
        margin = margin.min((moved - base) / base);
        done += 1;
    }
    Ok(KktReport { passed: margin >= KKT_SLACK, margin, trials })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
