use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wmanifold::manifold::integrated_metric_inverse;
use wmanifold::optimizer::{kkt_optimality_check, DEFAULT_ADAM_LR, DEFAULT_MOMENTUM, DEFAULT_SGD_LR, KKT_SLACK};
use wmanifold::oracle::{self, verify};
use wmanifold::tasks::regularized_loss;
use wmanifold::tensor::relative_error;
use wmanifold::{
    BasisBundle, ConditioningMode, Dataset, Error, Graph, ImtMatrix, ManifoldSpec, Network, NetworkSpec,
    OptimizerState, Rule, Split, Task, TaskSpec, Tensor,
};

fn scaled(b: &BasisBundle, c: f64) -> BasisBundle {
    let mut out = b.clone();
    for e in out.entries_mut() {
        for p in &mut e.points {
            *p = p.scale(c);
        }
    }
    out
}

#[test]
fn defaults() {
    assert_eq!(DEFAULT_SGD_LR, 0.01);
    assert_eq!(DEFAULT_MOMENTUM, 0.9);
    assert_eq!(DEFAULT_ADAM_LR, 0.0002);
    assert_eq!("sgd_momentum".parse::<Rule>().unwrap(), Rule::SgdMomentum { momentum: 0.9 });
    assert_eq!("adam".parse::<Rule>().unwrap().default_lr(), 2e-4);
    assert!("rmsprop".parse::<Rule>().is_err());
}

#[test]
fn point_manifold_training_reduces_to_plain_sgd() {
    let task = Task::new(TaskSpec::rotation(Dataset::Blobs2d, 0.1, 7)).unwrap();
    for mode in [ConditioningMode::Manifold, ConditioningMode::Concat, ConditioningMode::None] {
        let spec = NetworkSpec::mlp(2, &[64, 64], 4, mode, ManifoldSpec::point());
        let mut net = Network::init(spec, 7).unwrap();
        let init: Vec<Tensor> = net.bundle().entries().iter().map(|e| e.points[0].clone()).collect();
        let reference = oracle::reference_sgd(&net, &init, &task, 100, 64, DEFAULT_SGD_LR, DEFAULT_MOMENTUM).unwrap();

        let imt = net.manifold().imt().clone();
        let mut opt = OptimizerState::sgd(DEFAULT_SGD_LR, DEFAULT_MOMENTUM, net.bundle()).unwrap();
        for (step, want) in reference.iter().enumerate() {
            let batch = task.batch(Split::Train, step as u64, 64).unwrap();
            let mut g = Graph::new();
            let fp = net.forward(&mut g, &batch.inputs, Some(&batch.s)).unwrap();
            let loss = regularized_loss(&mut g, &net, &fp, &batch.labels, &batch.s, 0.0).unwrap();
            let grads = net.per_basis_gradients(&g, loss, &fp).unwrap();
            let value = g.value(loss).item();
            opt.step(&imt, net.bundle_mut(), &grads, value).unwrap();
            assert!(relative_error(&[value], &[want.loss], 1e-300) <= 1e-12, "{mode} step {step} loss");
            let got: Vec<f64> = net.bundle().flatten();
            let want: Vec<f64> = want.params.iter().flat_map(|t| t.data().to_vec()).collect();
            let e = relative_error(&got, &want, 1e-300);
            assert!(e <= 1e-12, "{mode} step {step}: {e:e}");
        }
    }
}

#[test]
fn line_step_without_momentum_follows_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let imt = integrated_metric_inverse(&ManifoldSpec::line()).unwrap();
    let (p1, p2) = (Tensor::randn(&[3, 2], &mut rng), Tensor::randn(&[3, 2], &mut rng));
    let (g1, g2) = (Tensor::randn(&[3, 2], &mut rng), Tensor::randn(&[3, 2], &mut rng));
    let mut bundle = BasisBundle::new();
    bundle.push("w", vec![p1.clone(), p2.clone()]).unwrap();
    let mut grads = BasisBundle::new();
    grads.push("w", vec![g1.clone(), g2.clone()]).unwrap();
    let eta = 0.05;
    let mut opt = OptimizerState::sgd(eta, 0.0, &bundle).unwrap();
    let report = opt.step(&imt, &mut bundle, &grads, 1.0).unwrap();
    let want1 = p1.sub(&g1.scale(4.0).sub(&g2.scale(2.0)).unwrap().scale(eta)).unwrap();
    let want2 = p2.sub(&g2.scale(4.0).sub(&g1.scale(2.0)).unwrap().scale(eta)).unwrap();
    let got = &bundle.entries()[0].points;
    assert!(relative_error(got[0].data(), want1.data(), 1e-300) <= 1e-15);
    assert!(relative_error(got[1].data(), want2.data(), 1e-300) <= 1e-15);
    assert_eq!(report.step, 1);
    assert!((report.grad_norms[0] - g1.norm()).abs() <= 1e-15 * g1.norm());
    assert!(report.rescaled_norms.iter().all(|v| v.is_finite()));
}

#[test]
fn tethered_rod_first_point_never_moves() {
    let imt = integrated_metric_inverse(&ManifoldSpec::tethered_rod()).unwrap();
    for rule in [Rule::SgdMomentum { momentum: 0.9 }, Rule::adam()] {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut bundle = BasisBundle::new();
        bundle.push("w", vec![Tensor::randn(&[4], &mut rng), Tensor::randn(&[4], &mut rng)]).unwrap();
        let init = bundle.clone();
        let mut opt = OptimizerState::new(rule, 0.01, &bundle).unwrap();
        for _ in 0..1000 {
            let mut grads = BasisBundle::new();
            grads.push("w", vec![Tensor::randn(&[4], &mut rng), Tensor::randn(&[4], &mut rng)]).unwrap();
            opt.step(&imt, &mut bundle, &grads, 0.0).unwrap();
        }
        let e = &bundle.entries()[0];
        assert_eq!(e.points[0], init.entries()[0].points[0], "{rule}");
        assert_ne!(e.points[1], init.entries()[0].points[1], "{rule}");
        assert!(opt.velocity().entries()[0].points[0].data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn buffers_mirror_the_bundle() {
    let net = Network::init(
        NetworkSpec::cnn([1, 16, 16], &[8, 16], 3, 64, 10, ConditioningMode::Manifold, ManifoldSpec::ellipse()),
        0,
    )
    .unwrap();
    let opt = OptimizerState::new(Rule::adam(), 1e-3, net.bundle()).unwrap();
    assert!(opt.velocity().check_same_structure(net.bundle()).is_ok());
    assert_eq!(opt.velocity().flatten().len(), net.bundle().flatten().len());
}

#[test]
fn non_finite_gradient_names_parameter_and_basis() {
    let imt = integrated_metric_inverse(&ManifoldSpec::line()).unwrap();
    let mut bundle = BasisBundle::new();
    bundle.push("layer0.weight", vec![Tensor::zeros(&[2]); 2]).unwrap();
    bundle.push("layer0.bias", vec![Tensor::zeros(&[1]); 2]).unwrap();
    let mut grads = bundle.zeros_like();
    grads.entries_mut()[1].points[1].data_mut()[0] = f64::INFINITY;
    let before = bundle.clone();
    let mut opt = OptimizerState::sgd(0.1, 0.9, &bundle).unwrap();
    match opt.step(&imt, &mut bundle, &grads, 1.0) {
        Err(Error::NonFinite(msg)) => {
            assert!(msg.contains("layer0.bias") && msg.contains("basis 1"), "{msg}");
        }
        other => panic!("expected non-finite error, got {other:?}"),
    }
    assert_eq!(bundle, before);
    assert_eq!(opt.steps(), 0);
}

#[test]
fn invalid_hyperparameters_are_config_errors() {
    let like = BasisBundle::new();
    assert!(matches!(OptimizerState::sgd(0.0, 0.9, &like), Err(Error::Config(_))));
    assert!(matches!(OptimizerState::sgd(0.1, 1.0, &like), Err(Error::Config(_))));
    assert!(matches!(
        OptimizerState::new(Rule::Adam { beta1: 0.9, beta2: 0.999, eps: 0.0 }, 1e-3, &like),
        Err(Error::Config(_))
    ));
}

/// Least squares regression whose weights live on a line manifold:
/// `ŷ_i = x_iᵀ((1 − s_i)P_1 + s_i P_2)`, loss `(1/B) Σ (ŷ_i − y_i)²`.
struct Regression {
    x: Tensor,
    y: Tensor,
    coeffs: Tensor,
}

impl Regression {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = 32;
        let x = Tensor::randn(&[b, 3], &mut rng);
        let s: Vec<f64> = (0..b).map(|_| rng.random_range(0.0..=1.0)).collect();
        let y = Tensor::randn(&[b, 1], &mut rng);
        let coeffs = Tensor::new(&[b, 2], s.iter().flat_map(|&v| [1.0 - v, v]).collect()).unwrap();
        Self { x, y, coeffs }
    }

    fn loss_and_grads(&self, bundle: &BasisBundle) -> (f64, BasisBundle) {
        let mut g = Graph::new();
        let pts = &bundle.entries()[0].points;
        let p: Vec<_> = pts.iter().map(|t| g.param(t.clone())).collect();
        let x = g.constant(self.x.clone());
        let outs = [g.matmul(x, p[0]).unwrap(), g.matmul(x, p[1]).unwrap()];
        let pred = g.mix_rows(&outs, self.coeffs.clone()).unwrap();
        let neg = g.constant(self.y.scale(-1.0));
        let r = g.add(pred, neg).unwrap();
        let sq = g.dot(r, r).unwrap();
        let loss = g.scale(sq, 1.0 / self.x.shape()[0] as f64).unwrap();
        let grads = g.backward(loss).unwrap();
        let mut out = BasisBundle::new();
        out.push("w", p.iter().map(|&v| grads.wrt(v)).collect()).unwrap();
        (g.value(loss).item(), out)
    }

    fn run(&self, init: &BasisBundle, eta: f64, steps: usize) -> Vec<f64> {
        let imt = integrated_metric_inverse(&ManifoldSpec::line()).unwrap();
        let mut bundle = init.clone();
        let mut opt = OptimizerState::sgd(eta, 0.0, &bundle).unwrap();
        let mut losses = Vec::with_capacity(steps + 1);
        for _ in 0..steps {
            let (l, grads) = self.loss_and_grads(&bundle);
            losses.push(l);
            opt.step(&imt, &mut bundle, &grads, l).unwrap();
        }
        losses.push(self.loss_and_grads(&bundle).0);
        losses
    }
}

#[test]
fn convex_regression_descends_monotonically_after_halving() {
    for seed in 0..50 {
        let problem = Regression::new(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut init = BasisBundle::new();
        init.push("w", vec![Tensor::randn(&[3, 1], &mut rng), Tensor::randn(&[3, 1], &mut rng)]).unwrap();
        let mut eta = 1.0;
        let mut halvings = 0;
        let losses = loop {
            let losses = problem.run(&init, eta, 100);
            if losses.windows(2).all(|w| w[1] <= w[0]) {
                break losses;
            }
            eta /= 2.0;
            halvings += 1;
            assert!(halvings <= 30, "seed {seed}: no monotone step size found");
        };
        assert!(losses.last().unwrap() < &losses[0], "seed {seed}");
    }
}

fn descent_direction(spec: ManifoldSpec, seed: u64) -> (BasisBundle, BasisBundle, ImtMatrix) {
    let (net, batch) = verify::toy_instance(spec, seed).unwrap();
    let imt = integrated_metric_inverse(&spec).unwrap();
    let (grads, rescaled) = verify::factored_direction(&net, &batch, &imt).unwrap();
    (grads, scaled(&rescaled, -0.01), imt)
}

#[test]
fn kkt_identical_perturbation_has_zero_margin() {
    let (_, delta, _) = descent_direction(ManifoldSpec::line(), 1);
    let spec = ManifoldSpec::line();
    let a = oracle::volumetric_movement(&spec, &delta).unwrap();
    let b = oracle::volumetric_movement(&spec, &delta.clone()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn kkt_rejects_the_raw_gradient_direction() {
    let spec = ManifoldSpec::line();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut grads = BasisBundle::new();
    let g1 = Tensor::randn(&[5], &mut rng);
    grads.push("w", vec![g1.clone(), g1.scale(-0.2)]).unwrap();
    let imt = integrated_metric_inverse(&spec).unwrap();
    let optimal = scaled(&imt.rescale_bundle(&grads).unwrap(), -0.01);
    let raw = scaled(&grads, -0.01);

    let dot = |a: &BasisBundle, b: &BasisBundle| a.flatten().iter().zip(b.flatten()).map(|(x, y)| x * y).sum::<f64>();
    let raw = scaled(&raw, dot(&grads, &optimal) / dot(&grads, &raw));
    assert!((dot(&grads, &raw) - dot(&grads, &optimal)).abs() <= 1e-14 * dot(&grads, &optimal).abs());
    let m_opt = oracle::volumetric_movement(&spec, &optimal).unwrap();
    let m_raw = oracle::volumetric_movement(&spec, &raw).unwrap();
    assert!(m_raw > m_opt * (1.0 + 1e-6), "raw {m_raw} vs optimal {m_opt}");

    let report = kkt_optimality_check(&spec, &grads, &raw, 100, 9).unwrap();
    assert!(!report.passed && report.margin < KKT_SLACK);
    let report = kkt_optimality_check(&spec, &grads, &optimal, 100, 9).unwrap();
    assert!(report.passed, "margin {}", report.margin);
}

#[test]
fn kkt_holds_on_twenty_toy_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..20 {
        let spec = verify::random_spec(i + 1, &mut rng);
        let (grads, delta, _) = descent_direction(spec, 500 + i as u64);
        let r = kkt_optimality_check(&spec, &grads, &delta, 100, i as u64).unwrap();
        assert_eq!(r.trials, 100);
        assert!(r.passed && r.margin >= KKT_SLACK, "{spec}: margin {}", r.margin);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn frozen_buffers_stay_zero(seed in any::<u64>(), steps in 1usize..20) {
        let imt = integrated_metric_inverse(&ManifoldSpec::tethered_rod()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bundle = BasisBundle::new();
        bundle.push("w", vec![Tensor::randn(&[3], &mut rng), Tensor::randn(&[3], &mut rng)]).unwrap();
        let mut opt = OptimizerState::new(Rule::adam(), 0.01, &bundle).unwrap();
        for _ in 0..steps {
            let mut grads = BasisBundle::new();
            grads.push("w", vec![Tensor::randn(&[3], &mut rng), Tensor::randn(&[3], &mut rng)]).unwrap();
            let r = opt.step(&imt, &mut bundle, &grads, 0.5).unwrap();
            prop_assert!(r.grad_norms.iter().chain(&r.rescaled_norms).all(|v| v.is_finite()));
            prop_assert_eq!(r.rescaled_norms[0], 0.0);
        }
        prop_assert!(opt.velocity().entries()[0].points[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rescaled_direction_is_never_beaten(seed in 0u64..100_000, kind in 1usize..5) {
        let spec = verify::random_spec(kind, &mut ChaCha8Rng::seed_from_u64(seed));
        let (grads, delta, _) = descent_direction(spec, seed);
        let r = kkt_optimality_check(&spec, &grads, &delta, 20, seed).unwrap();
        prop_assert!(r.passed, "{} margin {}", spec, r.margin);
    }
}
