//! Runs every oracle comparison and collects a pass/fail report.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::manifold::{integrated_metric_inverse, BasisBundle, ImtMatrix, ManifoldKind, ManifoldSpec};
use crate::network::{ConditioningMode, Network, NetworkSpec};
use crate::optimizer::kkt_optimality_check;
use crate::oracle::{self, Scheme};
use crate::tasks::{self, ConditionedBatch, Dataset, Task, TaskSpec};
use crate::tensor::{relative_error, Tensor};

pub const GRAM_AGREEMENT_TOL: f64 = 1e-12;
pub const INVERSE_TOL: f64 = 1e-10;
pub const DENSE_UPDATE_TOL: f64 = 1e-8;
pub const FORWARD_TOL: f64 = 1e-12;
pub const GRADIENT_TOL: f64 = 1e-5;
pub const FD_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    pub fn below(name: impl Into<String>, max_error: f64, tolerance: f64) -> Self {
        Self { name: name.into(), max_error, tolerance, pass: max_error <= tolerance }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
    pub pass: bool,
}

impl VerifyReport {
    pub fn new(checks: Vec<Check>) -> Self {
        let pass = checks.iter().all(|c| c.pass);
        Self { checks, pass }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
        writeln!(f, "{:<width$}  {:>12}  {:>10}  result", "check", "max_error", "tolerance")?;
        for c in &self.checks {
            let result = if c.pass { "PASS" } else { "FAIL" };
            writeln!(f, "{:<width$}  {:>12.3e}  {:>10.1e}  {result}", c.name, c.max_error, c.tolerance)?;
        }
        let failed = self.checks.iter().filter(|c| !c.pass).count();
        write!(f, "{} checks, {failed} failed", self.checks.len())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyOptions {
    /// Added to the first learnable diagonal entry of every analytic metric
    /// inverse before checking. Non-zero values must make the run fail.
    pub imt_perturbation: f64,
    pub dense_instances: usize,
    pub kkt_instances: usize,
    pub kkt_trials: usize,
    pub forward_cases: usize,
    pub gradient_seeds: usize,
    pub bayes_samples: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            imt_perturbation: 0.0,
            dense_instances: 50,
            kkt_instances: 20,
            kkt_trials: 100,
            forward_cases: 200,
            gradient_seeds: 20,
            bayes_samples: 100_000,
        }
    }
}

/// Every manifold configuration the checks sweep over.
pub fn reference_specs() -> Vec<ManifoldSpec> {
    vec![
        ManifoldSpec::point(),
        ManifoldSpec::line(),
        ManifoldSpec::tethered_rod(),
        ManifoldSpec::ellipse(),
        ManifoldSpec::cubic_bspline(8, false).expect("valid"),
        ManifoldSpec::cubic_bspline(8, true).expect("valid"),
    ]
}

fn spec_label(spec: &ManifoldSpec) -> String {
    match spec.kind() {
        ManifoldKind::CubicBspline => {
            format!("cubic_bspline{}{}", spec.n_basis(), if spec.periodic() { "p" } else { "" })
        }
        k => k.as_str().to_string(),
    }
}

pub fn perturbed_imt(spec: &ManifoldSpec, delta: f64) -> Result<ImtMatrix> {
    let mut imt = integrated_metric_inverse(spec)?;
    if delta != 0.0 {
        if let Some(i) = (0..imt.n()).find(|&i| !imt.is_frozen(i)) {
            imt.set(i, i, imt.get(i, i) + delta);
        }
    }
    Ok(imt)
}

/// `max |C·T − I|` over the learnable block, with `T` from converged Simpson.
pub fn inverse_error(spec: &ManifoldSpec, imt: &ImtMatrix) -> Result<f64> {
    let t = oracle::quad_gram(spec, Scheme::Simpson)?.matrix;
    let n = spec.n_basis();
    let free: Vec<usize> = (0..n).filter(|&i| !imt.is_frozen(i)).collect();
    let mut worst = 0.0f64;
    for &i in &free {
        for &j in &free {
            let v: f64 = free.iter().map(|&k| imt.get(i, k) * t[k][j]).sum();
            let e = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((v - e).abs());
        }
    }
    Ok(worst)
}

/// Toy instance: MLP 2→3→2 (17 parameters per basis point) with fully random
/// basis points, and an 8-example batch with random modulators.
pub fn toy_instance(spec: ManifoldSpec, seed: u64) -> Result<(Network, ConditionedBatch)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net_spec = NetworkSpec::mlp(2, &[3], 2, ConditioningMode::Manifold, spec);
    let template = Network::init(net_spec.clone(), seed)?;
    let mut bundle = BasisBundle::new();
    for e in template.bundle().entries() {
        let pts = e.points.iter().map(|p| Tensor::randn(p.shape(), &mut rng)).collect();
        bundle.push(e.name.clone(), pts)?;
    }
    let net = Network::from_parts(net_spec, bundle)?;
    let b = 8;
    let inputs = Tensor::randn(&[b, 2], &mut rng);
    let labels = (0..b).map(|_| rng.random_range(0..2)).collect();
    let s = (0..b).map(|_| rng.random_range(0.0..=1.0)).collect();
    Ok((net, ConditionedBatch { inputs, labels, s }))
}

/// A random manifold spec, cycling through every kind.
pub fn random_spec(i: usize, rng: &mut impl Rng) -> ManifoldSpec {
    match i % 5 {
        0 => ManifoldSpec::point(),
        1 => ManifoldSpec::line(),
        2 => ManifoldSpec::tethered_rod(),
        3 => ManifoldSpec::ellipse(),
        _ => ManifoldSpec::cubic_bspline(rng.random_range(4..=6), rng.random_bool(0.5)).expect("valid"),
    }
}

/// Factored route: batch-mean cross-entropy through the factored forward pass,
/// per-basis gradients, then `imt` rescaling. Returned basis-major.
pub fn factored_direction(net: &Network, batch: &ConditionedBatch, imt: &ImtMatrix) -> Result<(BasisBundle, BasisBundle)> {
    let mut g = Graph::new();
    let fp = net.forward(&mut g, &batch.inputs, Some(&batch.s))?;
    let loss = g.softmax_cross_entropy(fp.logits, &batch.labels)?;
    let grads = net.per_basis_gradients(&g, loss, &fp)?;
    let rescaled = imt.rescale_bundle(&grads)?;
    Ok((grads, rescaled))
}

/// Relative gap between factored rescaled gradients and the dense route.
pub fn dense_update_error(net: &Network, batch: &ConditionedBatch, imt: &ImtMatrix) -> Result<f64> {
    let (_, rescaled) = factored_direction(net, batch, imt)?;
    let dense = oracle::dense_update(net, batch)?;
    Ok(relative_error(&rescaled.flatten(), &dense.direction, 1e-300))
}

/// Relative gap between factored logits and per-example dense assembly.
pub fn forward_error(net: &Network, batch: &ConditionedBatch) -> Result<f64> {
    let mut g = Graph::new();
    let fp = net.forward(&mut g, &batch.inputs, Some(&batch.s))?;
    let factored = g.value(fp.logits).data().to_vec();
    let mut dense = Vec::with_capacity(factored.len());
    let width = batch.inputs.len() / batch.len();
    let spec = *net.manifold().spec();
    for i in 0..batch.len() {
        let w = spec.point_on_manifold(net.bundle(), batch.s[i])?;
        let mut shape = batch.inputs.shape().to_vec();
        shape[0] = 1;
        let x = Tensor::new(&shape, batch.inputs.data()[i * width..(i + 1) * width].to_vec())?;
        let mut g = Graph::new();
        let (logits, _) = net.forward_plain(&mut g, &w, &x, Some(&batch.s[i..=i]))?;
        dense.extend_from_slice(g.value(logits).data());
    }
    Ok(relative_error(&factored, &dense, 1e-300))
}

/// Reverse-mode gradients of `build` against central differences, over all
/// `inputs` jointly.
pub fn gradient_error(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<f64> = vars.iter().flat_map(|&v| grads.wrt(v).into_data()).collect();
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    let eval = |x: &[f64]| -> f64 {
        let mut g = Graph::new();
        let mut off = 0;
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| {
                let v = Tensor::new(t.shape(), x[off..off + t.len()].to_vec()).expect("same shape");
                off += t.len();
                g.param(v)
            })
            .collect();
        let out = build(&mut g, &vars).expect("probe evaluates");
        g.value(out).item()
    };
    let numeric = oracle::finite_difference(eval, &flat, FD_EPS);
    Ok(relative_error(&analytic, &numeric, 1e-8))
}

/// Gradient of the regularized loss of a manifold network with respect to
/// every basis point, against finite differences.
pub fn network_gradient_error(net: &Network, batch: &ConditionedBatch, lambda: f64) -> Result<f64> {
    let loss_at = |n: &Network| -> Result<(f64, Option<BasisBundle>)> {
        let mut g = Graph::new();
        let fp = n.forward(&mut g, &batch.inputs, Some(&batch.s))?;
        let l = tasks::regularized_loss(&mut g, n, &fp, &batch.labels, &batch.s, lambda)?;
        Ok((g.value(l).item(), Some(n.per_basis_gradients(&g, l, &fp)?)))
    };
    let (_, grads) = loss_at(net)?;
    let analytic = grads.expect("gradients computed").flatten();
    let x = net.bundle().flatten();
    let eval = |p: &[f64]| -> f64 {
        let bundle = net.bundle().unflatten_like(p).expect("same length");
        let probe = Network::from_parts(net.spec().clone(), bundle).expect("same structure");
        let mut g = Graph::new();
        let fp = probe.forward(&mut g, &batch.inputs, Some(&batch.s)).expect("forward");
        let l = tasks::regularized_loss(&mut g, &probe, &fp, &batch.labels, &batch.s, lambda).expect("loss");
        g.value(l).item()
    };
    let numeric = oracle::finite_difference(eval, &x, FD_EPS);
    Ok(relative_error(&analytic, &numeric, 1e-8))
}

/// Small conv net instance used by the gradient checks.
pub fn toy_cnn_instance(spec: ManifoldSpec, seed: u64) -> Result<(Network, ConditionedBatch)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net_spec = NetworkSpec::cnn([1, 6, 6], &[2], 3, 4, 3, ConditioningMode::Manifold, spec);
    let net = Network::init(net_spec.clone(), seed)?;
    let mut bundle = BasisBundle::new();
    for e in net.bundle().entries() {
        let pts = e.points.iter().map(|p| Tensor::randn(p.shape(), &mut rng).scale(0.5)).collect();
        bundle.push(e.name.clone(), pts)?;
    }
    let net = Network::from_parts(net_spec, bundle)?;
    let b = 3;
    let inputs = Tensor::randn(&[b, 1, 6, 6], &mut rng);
    let labels = (0..b).map(|_| rng.random_range(0..3)).collect();
    let s = (0..b).map(|_| rng.random_range(0.0..=1.0)).collect();
    Ok((net, ConditionedBatch { inputs, labels, s }))
}

/// Worst gradient error over the primitive ops for one seed.
pub fn op_gradient_errors(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let a = Tensor::randn(&[5, 7], &mut rng);
    let b = Tensor::randn(&[7, 3], &mut rng);
    out.push(("matmul", gradient_error(&[a, b], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        let w = g.constant(Tensor::from_fn(&[5, 3], |i| (i as f64 * 0.37).sin()));
        g.dot(y, w)
    })?));
    let x = Tensor::randn(&[2, 2, 6, 6], &mut rng);
    let k = Tensor::randn(&[3, 2, 3, 3], &mut rng);
    out.push(("conv2d", gradient_error(&[x, k], |g, v| {
        let y = g.conv2d(v[0], v[1])?;
        let w = g.constant(Tensor::from_fn(&[2, 3, 4, 4], |i| (i as f64 * 0.11).cos()));
        g.dot(y, w)
    })?));
    let logits = Tensor::randn(&[4, 3], &mut rng);
    let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
    out.push(("softmax_cross_entropy", gradient_error(&[logits], |g, v| g.softmax_cross_entropy(v[0], &labels))?));
    let x = Tensor::randn(&[2, 3, 4, 4], &mut rng);
    out.push(("relu_maxpool_flatten", gradient_error(&[x], |g, v| {
        let y = g.relu(v[0])?;
        let y = g.maxpool2x2(y)?;
        let y = g.flatten(y)?;
        let y = g.scale(y, 1.7)?;
        let w = g.constant(Tensor::from_fn(&[2, 12], |i| (i as f64 * 0.29).sin()));
        g.dot(y, w)
    })?));
    let x = Tensor::randn(&[4, 3], &mut rng);
    let bias = Tensor::randn(&[3], &mut rng);
    let y = Tensor::randn(&[4, 3], &mut rng);
    out.push(("add_bias_mix", gradient_error(&[x, bias, y], |g, v| {
        let z = g.add_bias(v[0], v[1])?;
        let z = g.add(z, v[2])?;
        let m = g.mix_rows(&[z, v[2]], Tensor::from_fn(&[4, 2], |i| 0.3 + i as f64 * 0.1))?;
        let w = g.constant(Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.5).cos()));
        g.dot(m, w)
    })?));
    Ok(out)
}

pub fn run(opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut checks = Vec::new();
    let specs = reference_specs();

    for spec in &specs {
        let simpson = oracle::quad_gram(spec, Scheme::Simpson)?.matrix;
        let gl = oracle::quad_gram(spec, Scheme::GaussLegendre)?.matrix;
        let diff = simpson
            .iter()
            .flatten()
            .zip(gl.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        checks.push(Check::below(format!("gram_simpson_vs_gauss/{}", spec_label(spec)), diff, GRAM_AGREEMENT_TOL));
    }

    for spec in &specs {
        let imt = perturbed_imt(spec, opts.imt_perturbation)?;
        checks.push(Check::below(
            format!("metric_inverse/{}", spec_label(spec)),
            inverse_error(spec, &imt)?,
            INVERSE_TOL,
        ));
    }

    let line = oracle::quad_gram(&ManifoldSpec::line(), Scheme::Simpson)?.matrix;
    let want = [[1.0 / 3.0, 1.0 / 6.0], [1.0 / 6.0, 1.0 / 3.0]];
    let line_err = (0..4).map(|i| (line[i / 2][i % 2] - want[i / 2][i % 2]).abs()).fold(0.0, f64::max);
    checks.push(Check::below("line_gram_exact", line_err, GRAM_AGREEMENT_TOL));
    let ellipse = perturbed_imt(&ManifoldSpec::ellipse(), opts.imt_perturbation)?;
    let diag = [1.0, 2.0, 2.0];
    let ellipse_err = (0..9)
        .map(|i| {
            let e = if i / 3 == i % 3 { diag[i / 3] } else { 0.0 };
            (ellipse.get(i / 3, i % 3) - e).abs()
        })
        .fold(0.0, f64::max);
    checks.push(Check::below("ellipse_inverse_exact", ellipse_err, 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(0x0dde);
    let mut worst = 0.0f64;
    for i in 0..opts.dense_instances {
        let spec = random_spec(i, &mut rng);
        let (net, batch) = toy_instance(spec, 1000 + i as u64)?;
        let imt = perturbed_imt(&spec, opts.imt_perturbation)?;
        worst = worst.max(dense_update_error(&net, &batch, &imt)?);
    }
    checks.push(Check::below("dense_update_equivalence", worst, DENSE_UPDATE_TOL));

    let mut worst = 0.0f64;
    for i in 0..opts.forward_cases {
        let spec = random_spec(i, &mut rng);
        let (net, batch) = if i % 4 == 3 {
            toy_cnn_instance(spec, 2000 + i as u64)?
        } else {
            toy_instance(spec, 2000 + i as u64)?
        };
        worst = worst.max(forward_error(&net, &batch)?);
    }
    checks.push(Check::below("factored_forward_equivalence", worst, FORWARD_TOL));

    let mut op_worst: Vec<(&'static str, f64)> = Vec::new();
    let mut net_worst = 0.0f64;
    for seed in 0..opts.gradient_seeds as u64 {
        for (name, e) in op_gradient_errors(seed)? {
            match op_worst.iter_mut().find(|(n, _)| *n == name) {
                Some(slot) => slot.1 = slot.1.max(e),
                None => op_worst.push((name, e)),
            }
        }
        let spec = random_spec(seed as usize, &mut rng);
        let (net, batch) = if seed % 2 == 0 {
            toy_instance(spec, 3000 + seed)?
        } else {
            toy_cnn_instance(spec, 3000 + seed)?
        };
        net_worst = net_worst.max(network_gradient_error(&net, &batch, 0.05)?);
    }
    for (name, e) in op_worst {
        checks.push(Check::below(format!("gradient/{name}"), e, GRADIENT_TOL));
    }
    checks.push(Check::below("gradient/regularized_network_loss", net_worst, GRADIENT_TOL));

    let mut worst_margin = f64::INFINITY;
    for i in 0..opts.kkt_instances {
        let spec = random_spec(i + 1, &mut rng);
        let (net, batch) = toy_instance(spec, 4000 + i as u64)?;
        let imt = perturbed_imt(&spec, opts.imt_perturbation)?;
        let (grads, rescaled) = factored_direction(&net, &batch, &imt)?;
        let mut delta = rescaled;
        for e in delta.entries_mut() {
            for p in &mut e.points {
                *p = p.scale(-0.01);
            }
        }
        let r = kkt_optimality_check(&spec, &grads, &delta, opts.kkt_trials, 5000 + i as u64)?;
        worst_margin = worst_margin.min(r.margin);
    }
    checks.push(Check::below("kkt_optimality", (-worst_margin).max(0.0), 1e-9));

    let task = Task::new(TaskSpec::rotation(Dataset::Blobs2d, 1.0, 0))?;
    let acc = oracle::bayes_accuracy(&task, opts.bayes_samples)?;
    checks.push(Check::below("bayes_blobs2d_error", 1.0 - acc, 0.01));

    Ok(VerifyReport::new(checks))
}
