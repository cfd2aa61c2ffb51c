//! Brute-force references: quadrature of manifold integrals, dense full-metric
//! updates, finite-difference gradients, a plain reference trainer and the
//! blobs2d Bayes classifier.
//!
//! Nothing here reuses the analytic metric tables or the factored forward pass.

pub mod verify;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::manifold::{BasisBundle, ManifoldKind, ManifoldSpec};
use crate::network::Network;
use crate::quadrature;
use crate::tasks::{Blobs2d, ConditionedBatch, Split, Task};
use crate::tensor::Tensor;

/// Largest Simpson interval count tried before giving up.
pub const MAX_SIMPSON_INTERVALS: usize = 1 << 20;
pub const CONVERGENCE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Scheme {
    /// Composite Simpson over `[0, 1]`, starting from 1000 intervals.
    Simpson,
    /// Gauss–Legendre on each knot span, starting from 64 nodes per span.
    GaussLegendre,
}

/// A converged quadrature rule and the last doubling change it saw.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuadratureRule {
    pub scheme: Scheme,
    pub nodes: usize,
    pub error_estimate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GramEstimate {
    pub matrix: Vec<Vec<f64>>,
    pub rule: QuadratureRule,
}

/// `T_ij = ∫₀¹ a_i(s) a_j(s) ds`, refined by doubling until the largest entry
/// change drops below [`CONVERGENCE_TOL`].
pub fn quad_gram(spec: &ManifoldSpec, scheme: Scheme) -> Result<GramEstimate> {
    let n = spec.n_basis();
    let integrand = |s: f64, out: &mut [f64]| {
        let a = spec.basis_coefficients(s).expect("quadrature nodes lie in [0, 1]");
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = a[i] * a[j];
            }
        }
    };
    let eval = |size: usize| -> (Vec<f64>, usize) {
        match scheme {
            Scheme::Simpson => (quadrature::simpson(0.0, 1.0, size, n * n, integrand), size + 1),
            Scheme::GaussLegendre => {
                let breaks = knot_spans(spec);
                let nodes = size * (breaks.len() - 1);
                (quadrature::gauss_legendre_piecewise(&breaks, size, n * n, integrand), nodes)
            }
        }
    };
    let (mut size, limit) = match scheme {
        Scheme::Simpson => (1000, MAX_SIMPSON_INTERVALS),
        Scheme::GaussLegendre => (64, 1024),
    };
    let (mut prev, _) = eval(size);
    loop {
        let next_size = size * 2;
        if next_size > limit {
            return Err(Error::contract(format!("{scheme:?} quadrature for {spec} did not converge")));
        }
        let (next, nodes) = eval(next_size);
        let change = prev.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if change < CONVERGENCE_TOL {
            let matrix = next.chunks(n).map(<[f64]>::to_vec).collect();
            return Ok(GramEstimate { matrix, rule: QuadratureRule { scheme, nodes, error_estimate: change } });
        }
        prev = next;
        size = next_size;
    }
}

/// Polynomial pieces of the coefficient functions, recomputed from the basis
/// definition rather than taken from the spec.
fn knot_spans(spec: &ManifoldSpec) -> Vec<f64> {
    let spans = match spec.kind() {
        ManifoldKind::CubicBspline if spec.periodic() => spec.n_basis(),
        ManifoldKind::CubicBspline => spec.n_basis() - 3,
        _ => 1,
    };
    (0..=spans).map(|i| i as f64 / spans as f64).collect()
}

/// Basis indices that never move.
pub fn frozen_indices(spec: &ManifoldSpec) -> Vec<usize> {
    match spec.kind() {
        ManifoldKind::TetheredRod => vec![0],
        _ => vec![],
    }
}

/// `∫₀¹ ‖Σ_k a_k(s) ΔP_k‖² ds` by composite Simpson on each knot span, with at
/// least 1000 intervals in total.
pub fn volumetric_movement(spec: &ManifoldSpec, delta: &BasisBundle) -> Result<f64> {
    delta.check_arity(spec)?;
    let n = spec.n_basis();
    let d = delta.point_dim();
    let flat = delta.flatten();
    let breaks = knot_spans(spec);
    let spans = breaks.len() - 1;
    let per_span = (1000usize.div_ceil(spans) + 1) & !1;
    let mut m = vec![0.0; d];
    let mut total = 0.0;
    for w in breaks.windows(2) {
        total += quadrature::simpson(w[0], w[1], per_span, 1, |s, out| {
            let a = spec.basis_coefficients(s.clamp(0.0, 1.0)).expect("node in range");
            m.iter_mut().for_each(|v| *v = 0.0);
            for k in 0..n {
                for (mv, p) in m.iter_mut().zip(&flat[k * d..(k + 1) * d]) {
                    *mv += a[k] * p;
                }
            }
            out[0] = m.iter().map(|v| v * v).sum();
        })[0];
    }
    Ok(total)
}

/// Explicit `J(s) = ∂M(s,P)/∂P = a(s)ᵀ ⊗ I_d` as a `d × nd` matrix.
pub fn jacobian(spec: &ManifoldSpec, s: f64, d: usize) -> Result<DMatrix<f64>> {
    let a = spec.basis_coefficients(s)?;
    let mut j = DMatrix::zeros(d, a.len() * d);
    for (k, ak) in a.iter().enumerate() {
        for r in 0..d {
            j[(r, k * d + r)] = *ak;
        }
    }
    Ok(j)
}

/// The `nd × nd` integrated metric `∫ J(s)ᵀ J(s) ds`, assembled densely with
/// 64-point Gauss–Legendre on every knot span.
pub fn dense_integrated_metric(spec: &ManifoldSpec, d: usize) -> Result<DMatrix<f64>> {
    let nd = spec.n_basis() * d;
    let (nodes, weights) = quadrature::gauss_legendre(64);
    let mut m = DMatrix::zeros(nd, nd);
    for w in knot_spans(spec).windows(2) {
        let (half, mid) = (0.5 * (w[1] - w[0]), 0.5 * (w[0] + w[1]));
        for (x, wt) in nodes.iter().zip(&weights) {
            let j = jacobian(spec, mid + half * x, d)?;
            m += (j.transpose() * &j) * (wt * half);
        }
    }
    Ok(m)
}

/// Dense-route update direction for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseUpdate {
    /// `(1/B) Σ_i J(s_i)ᵀ ∇ℓ_i`, basis-major.
    pub integrated_gradient: Vec<f64>,
    /// `[∫M ds]⁺ ∫g ds` with the pseudo-inverse taken on the non-frozen block.
    pub direction: Vec<f64>,
}

/// Builds the update of the steepest-descent problem literally: per-example
/// gradients at the assembled weights `M(s_i, P)`, explicit Jacobians, the
/// dense integrated metric and its inverse. The step is `−η · direction`.
pub fn dense_update(net: &Network, batch: &ConditionedBatch) -> Result<DenseUpdate> {
    let spec = *net.manifold().spec();
    let bundle = net.bundle();
    let d = bundle.point_dim();
    let n = spec.n_basis();
    let b = batch.len();
    let width = batch.inputs.len() / b.max(1);
    let mut integrated = DVector::zeros(n * d);
    for i in 0..b {
        let weights = spec.point_on_manifold(bundle, batch.s[i])?;
        let mut shape = batch.inputs.shape().to_vec();
        shape[0] = 1;
        let x = Tensor::new(&shape, batch.inputs.data()[i * width..(i + 1) * width].to_vec())?;
        let mut g = Graph::new();
        let s = [batch.s[i]];
        let (logits, vars) = net.forward_plain(&mut g, &weights, &x, Some(&s))?;
        let loss = g.softmax_cross_entropy(logits, &[batch.labels[i]])?;
        let grads = g.backward(loss)?;
        let flat: Vec<f64> = vars.iter().flat_map(|&v| grads.wrt(v).into_data()).collect();
        let j = jacobian(&spec, batch.s[i], d)?;
        integrated += j.transpose() * DVector::from_vec(flat) / b as f64;
    }
    let integrated: Vec<f64> = integrated.iter().copied().collect();
    let direction = dense_direction(&spec, d, &integrated)?;
    Ok(DenseUpdate { integrated_gradient: integrated, direction })
}

/// Solves `[∫M ds] x = ḡ` on the non-frozen block for a basis-major
/// integrated gradient `ḡ` of `n·d` entries; frozen entries of `x` are zero.
pub fn dense_direction(spec: &ManifoldSpec, d: usize, integrated: &[f64]) -> Result<Vec<f64>> {
    let n = spec.n_basis();
    if integrated.len() != n * d {
        return Err(Error::Dimension { op: "dense_direction", lhs: vec![integrated.len()], rhs: vec![n * d] });
    }
    let metric = dense_integrated_metric(spec, d)?;
    let frozen = frozen_indices(spec);
    let keep: Vec<usize> = (0..n * d).filter(|i| !frozen.contains(&(i / d))).collect();
    let sub = DMatrix::from_fn(keep.len(), keep.len(), |r, c| metric[(keep[r], keep[c])]);
    let rhs = DVector::from_fn(keep.len(), |r, _| integrated[keep[r]]);
    let sol = sub
        .lu()
        .solve(&rhs)
        .filter(|v| v.iter().all(|x| x.is_finite()))
        .ok_or_else(|| Error::contract(format!("integrated metric of {spec} is singular")))?;
    let mut direction = vec![0.0; n * d];
    for (r, &i) in keep.iter().enumerate() {
        direction[i] = sol[r];
    }
    Ok(direction)
}

/// Central differences `(f(x + εe_i) − f(x − εe_i)) / 2ε` for every coordinate.
pub fn finite_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let hi = f(&probe);
            probe[i] = x[i] - eps;
            let lo = f(&probe);
            probe[i] = x[i];
            (hi - lo) / (2.0 * eps)
        })
        .collect()
}

pub fn bayes_blobs2d(blobs: &Blobs2d, point: [f64; 2], theta: f64) -> usize {
    blobs.bayes(point, theta)
}

/// Fraction of `samples` train-split blobs2d examples the Bayes rule labels
/// correctly.
pub fn bayes_accuracy(task: &Task, samples: usize) -> Result<f64> {
    let chunk = 4096;
    let mut correct = 0usize;
    let mut seen = 0usize;
    let mut idx = 0u64;
    while seen < samples {
        let size = chunk.min(samples - seen);
        let batch = task.batch(Split::Train, idx, size)?;
        for i in 0..size {
            let p = [batch.inputs.data()[2 * i], batch.inputs.data()[2 * i + 1]];
            let theta = std::f64::consts::TAU * batch.s[i];
            correct += usize::from(bayes_blobs2d(task.blobs(), p, theta) == batch.labels[i]);
        }
        seen += size;
        idx += 1;
    }
    Ok(correct as f64 / samples as f64)
}

/// One step of [`reference_sgd`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceStep {
    pub loss: f64,
    pub params: Vec<Tensor>,
}

/// Ordinary minibatch SGD with momentum (`v ← μv + g`, `p ← p − ηv`) on a
/// single weight set, using the plain forward pass.
pub fn reference_sgd(
    net: &Network,
    init: &[Tensor],
    task: &Task,
    steps: usize,
    batch_size: usize,
    lr: f64,
    momentum: f64,
) -> Result<Vec<ReferenceStep>> {
    let mut params = init.to_vec();
    let mut velocity: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut out = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = task.batch(Split::Train, step as u64, batch_size)?;
        let mut g = Graph::new();
        let (logits, vars) = net.forward_plain(&mut g, &params, &batch.inputs, Some(&batch.s))?;
        let loss = g.softmax_cross_entropy(logits, &batch.labels)?;
        let grads = g.backward(loss)?;
        for ((p, v), &var) in params.iter_mut().zip(&mut velocity).zip(&vars) {
            let gr = grads.wrt(var);
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(gr.data()) {
                *vv = momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        out.push(ReferenceStep { loss: g.value(loss).item(), params: params.clone() });
    }
    Ok(out)
}
