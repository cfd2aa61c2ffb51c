use std::f64::consts::TAU;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wmanifold::oracle::{self, verify};
use wmanifold::tasks::{
    blend, penalty_weights, regularized_loss, rotate, Blobs2d, Digits, ANGLE_GRID, BUCKETS, DIGIT_SIZE,
};
use wmanifold::{
    BasisBundle, ConditioningMode, Dataset, Error, Graph, ManifoldSpec, Network, NetworkSpec, Split, Task,
    TaskFamily, TaskSpec, Tensor,
};

fn rotation(p: f64, seed: u64) -> Task {
    Task::new(TaskSpec::rotation(Dataset::Blobs2d, p, seed)).unwrap()
}

#[test]
fn full_sparsity_uses_the_whole_grid_for_training() {
    let task = rotation(1.0, 3);
    assert_eq!(task.train_angles(), (0..ANGLE_GRID).collect::<Vec<_>>().as_slice());
    assert_eq!(task.max_test_gap(), 0.0);
    let train = task.batch(Split::Train, 0, 20_000).unwrap();
    let test = task.batch(Split::Test, 0, 20_000).unwrap();
    let hist = |s: &[f64]| {
        let mut h = vec![0usize; BUCKETS];
        s.iter().for_each(|&v| h[task.condition_bucket(v)] += 1);
        h
    };
    for (a, b) in hist(&train.s).into_iter().zip(hist(&test.s)) {
        assert!((a as f64 - b as f64).abs() < 0.1 * a as f64, "{a} vs {b}");
    }
}

#[test]
fn train_subset_is_fixed_per_seed() {
    for p in [0.05, 0.1, 0.25, 0.5] {
        let task = rotation(p, 11);
        assert_eq!(task.train_angles().len(), (p * ANGLE_GRID as f64).ceil() as usize);
        assert_eq!(task.train_angles(), rotation(p, 11).train_angles());
        let mut sorted = task.train_angles().to_vec();
        sorted.dedup();
        assert_eq!(sorted.len(), task.train_angles().len());
    }
    assert_ne!(rotation(0.1, 1).train_angles(), rotation(0.1, 2).train_angles());
}

#[test]
fn train_batches_only_use_training_angles() {
    let task = rotation(0.05, 4);
    let batch = task.batch(Split::Train, 9, 2000).unwrap();
    for &s in &batch.s {
        let j = (s * ANGLE_GRID as f64).round() as usize;
        assert!(task.train_angles().binary_search(&j).is_ok());
        assert!(task.angular_distance_to_train(TAU * s) < 1e-12);
    }
    let test = task.batch(Split::Test, 9, 2000).unwrap();
    assert!(test.s.iter().any(|&s| task.angular_distance_to_train(TAU * s) > 1e-3));
}

#[test]
fn invalid_task_specs_are_config_errors() {
    for p in [0.0, -0.1, 1.5, f64::NAN] {
        assert!(matches!(Task::new(TaskSpec::rotation(Dataset::Blobs2d, p, 0)), Err(Error::Config(_))), "p={p}");
    }
    for s in [0.0, 1.01] {
        assert!(matches!(Task::new(TaskSpec::noise(Dataset::Digits16, s, 0)), Err(Error::Config(_))), "S={s}");
    }
    assert!(matches!(Task::new(TaskSpec::rotation(Dataset::Blobs2d, 1e-3, 0)), Err(Error::Config(_))));
    let one = TaskSpec::rotation(Dataset::Blobs2d, 1.0 / ANGLE_GRID as f64, 0);
    assert_eq!(Task::new(one).unwrap().train_angles().len(), 1);
    let no_grid = TaskSpec { grid: 0, ..TaskSpec::rotation(Dataset::Blobs2d, 1.0, 0) };
    assert!(matches!(Task::new(no_grid), Err(Error::Config(_))));
}

#[test]
fn zero_angle_reproduces_the_base_pattern() {
    let task = rotation(1.0, 0);
    for label in 0..4 {
        let mut r1 = ChaCha8Rng::seed_from_u64(label as u64);
        let mut r2 = r1.clone();
        let mut out = [0.0; 2];
        task.base_example(label, 0.0, &mut r1, &mut out);
        assert_eq!(out, task.blobs().sample(label, &mut r2));
    }
    let digits = Task::new(TaskSpec::rotation(Dataset::Digits16, 1.0, 0)).unwrap();
    let mut a = vec![0.0; DIGIT_SIZE * DIGIT_SIZE];
    let mut b = a.clone();
    digits.base_example(3, 0.0, &mut ChaCha8Rng::seed_from_u64(5), &mut a);
    digits.base_example(3, 0.0, &mut ChaCha8Rng::seed_from_u64(5), &mut b);
    assert_eq!(a, b);
}

#[test]
fn rotation_modulator_encodes_the_angle() {
    let task = rotation(0.25, 2);
    let batch = task.batch(Split::Test, 0, 500).unwrap();
    for (i, &s) in batch.s.iter().enumerate() {
        assert!((0.0..1.0).contains(&s));
        let p = [batch.inputs.data()[2 * i], batch.inputs.data()[2 * i + 1]];
        let back = rotate(p, -TAU * s);
        let r = (back[0].powi(2) + back[1].powi(2)).sqrt();
        assert!(r < 10.0);
    }
}

#[test]
fn bayes_classifier_examples() {
    let b = Blobs2d::default();
    for c in 0..b.classes {
        assert_eq!(oracle::bayes_blobs2d(&b, b.center(c), 0.0), c);
    }
    let task = rotation(0.1, 0);
    let acc = oracle::bayes_accuracy(&task, 100_000).unwrap();
    assert!(acc >= 0.99, "Bayes accuracy {acc}");
}

#[test]
fn noise_level_zero_is_the_clean_input() {
    let task = Task::new(TaskSpec::noise(Dataset::Digits16, 1.0, 0)).unwrap();
    let n = DIGIT_SIZE * DIGIT_SIZE;
    for label in 0..10 {
        let mut clean = vec![0.0; n];
        let mut noisy = vec![0.0; n];
        task.base_example(label, 0.0, &mut ChaCha8Rng::seed_from_u64(label as u64), &mut clean);
        task.noisy_example(label, 0.0, &mut ChaCha8Rng::seed_from_u64(label as u64), &mut noisy);
        assert_eq!(clean, noisy);
    }
    assert_eq!(blend(0.37, 5.0, 0.0), 0.37);
    assert_eq!(blend(0.37, 5.0, 1.0), 5.0);
}

#[test]
fn noise_level_one_is_standard_normal() {
    let task = Task::new(TaskSpec::noise(Dataset::Digits16, 1.0, 0)).unwrap();
    let n = DIGIT_SIZE * DIGIT_SIZE;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut values = Vec::with_capacity(100_096);
    let mut row = vec![0.0; n];
    while values.len() < 100_000 {
        task.noisy_example(rng.random_range(0..10), 1.0, &mut rng, &mut row);
        values.extend_from_slice(&row);
    }
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    assert!(mean.abs() < 0.01, "mean {mean}");
    assert!((var - 1.0).abs() < 0.01, "variance {var}");
}

#[test]
fn noise_levels_are_uniform_on_the_configured_range() {
    let task = Task::new(TaskSpec::noise(Dataset::Blobs2d, 0.5, 1)).unwrap();
    let batch = task.batch(Split::Train, 0, 20_000).unwrap();
    assert!(batch.s.iter().all(|&s| (0.0..=0.5).contains(&s)));
    let mean = batch.s.iter().sum::<f64>() / batch.s.len() as f64;
    assert!((mean - 0.25).abs() < 0.01, "{mean}");
    assert_eq!(task.condition_bucket(0.5), BUCKETS - 1);
    assert_eq!(task.condition_bucket(0.0), 0);
    assert_eq!(task.spec().family, TaskFamily::Noise);
}

#[test]
fn batch_streams_are_bit_identical_for_a_seed() {
    for spec in [
        TaskSpec::rotation(Dataset::Blobs2d, 0.1, 5),
        TaskSpec::rotation(Dataset::Digits16, 0.5, 5),
        TaskSpec::noise(Dataset::Digits16, 1.0, 5),
    ] {
        let a = Task::new(spec.clone()).unwrap();
        let b = Task::new(spec.clone()).unwrap();
        for split in [Split::Train, Split::Test] {
            for idx in [0, 1, 1000] {
                let x = a.batch(split, idx, 16).unwrap();
                let y = b.batch(split, idx, 16).unwrap();
                let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&x.inputs), bits(&y.inputs));
                assert_eq!(x.labels, y.labels);
                assert_eq!(x.s, y.s);
            }
        }
        let other = Task::new(TaskSpec { seed: 6, ..spec }).unwrap();
        assert_ne!(a.batch(Split::Train, 0, 16).unwrap().inputs, other.batch(Split::Train, 0, 16).unwrap().inputs);
    }
}

#[test]
fn batches_satisfy_the_invariants() {
    for spec in [TaskSpec::rotation(Dataset::Digits16, 0.1, 2), TaskSpec::noise(Dataset::Blobs2d, 1.0, 2)] {
        let task = Task::new(spec).unwrap();
        let b = task.batch(Split::Test, 3, 33).unwrap();
        assert_eq!(b.len(), 33);
        assert_eq!(b.inputs.shape()[0], 33);
        assert_eq!(&b.inputs.shape()[1..], task.input_shape().as_slice());
        assert_eq!(b.s.len(), 33);
        assert!(b.s.iter().all(|s| s.is_finite() && (0.0..=1.0).contains(s)));
        assert!(b.labels.iter().all(|&l| l < task.classes()));
        assert!(b.inputs.is_finite());
    }
}

#[test]
fn bundled_digits_are_distinct_glyphs() {
    let d = Digits::bundled();
    assert_eq!((d.height, d.width, d.glyphs.len()), (16, 16, 10));
    for i in 0..10 {
        for j in i + 1..10 {
            let diff: f64 = d.glyphs[i].iter().zip(&d.glyphs[j]).map(|(a, b)| (a - b).abs()).sum();
            assert!(diff > 5.0, "glyphs {i} and {j} nearly equal");
        }
    }
    assert!(Digits::parse(b"DG16").is_err());
}

#[test]
fn angular_distance_is_circular() {
    let task = rotation(0.05, 8);
    let first = task.angle(task.train_angles()[0]);
    assert_eq!(task.angular_distance_to_train(first), 0.0);
    assert!(task.angular_distance_to_train(first + TAU).abs() < 1e-12);
    let gap = task.max_test_gap();
    assert!(gap > 0.0 && gap < std::f64::consts::PI);
    for j in 0..ANGLE_GRID {
        assert!(task.angular_distance_to_train(task.angle(j)) <= gap);
    }
}

fn line_mlp(seed: u64) -> Network {
    Network::init(NetworkSpec::mlp(2, &[6], 4, ConditioningMode::Manifold, ManifoldSpec::line()), seed).unwrap()
}

#[test]
fn zero_weight_or_zero_modulators_give_plain_cross_entropy() {
    let net = line_mlp(1);
    let task = rotation(1.0, 1);
    let batch = task.batch(Split::Train, 0, 32).unwrap();
    let mut g = Graph::new();
    let fp = net.forward(&mut g, &batch.inputs, Some(&batch.s)).unwrap();
    let ce = g.softmax_cross_entropy(fp.logits, &batch.labels).unwrap();
    let l = regularized_loss(&mut g, &net, &fp, &batch.labels, &batch.s, 0.0).unwrap();
    assert_eq!(g.value(l).item(), g.value(ce).item());

    let zeros = vec![0.0; 32];
    let mut g = Graph::new();
    let fp = net.forward(&mut g, &batch.inputs, Some(&zeros)).unwrap();
    let ce = g.softmax_cross_entropy(fp.logits, &batch.labels).unwrap();
    let l = regularized_loss(&mut g, &net, &fp, &batch.labels, &zeros, 0.3).unwrap();
    assert_eq!(g.value(l).item(), g.value(ce).item());

    let mut g = Graph::new();
    let fp = net.forward(&mut g, &batch.inputs, Some(&batch.s)).unwrap();
    assert!(matches!(regularized_loss(&mut g, &net, &fp, &batch.labels, &batch.s, -1e-3), Err(Error::Config(_))));
}

#[test]
fn penalty_requires_manifold_conditioning() {
    let net = Network::init(NetworkSpec::mlp(2, &[6], 4, ConditioningMode::Concat, ManifoldSpec::point()), 0).unwrap();
    let x = Tensor::zeros(&[2, 2]);
    let s = [0.5, 0.5];
    let mut g = Graph::new();
    let fp = net.forward(&mut g, &x, Some(&s)).unwrap();
    assert!(matches!(regularized_loss(&mut g, &net, &fp, &[0, 1], &s, 1e-3), Err(Error::Contract(_))));
}

#[test]
fn single_example_penalty_matches_dense_assembly() {
    let lambda = 0.01;
    for seed in 0..5 {
        let net = line_mlp(seed);
        let x = Tensor::new(&[1, 2], vec![0.3, -0.4]).unwrap();
        let s = [0.5];
        let mut g = Graph::new();
        let fp = net.forward(&mut g, &x, Some(&s)).unwrap();
        let ce = g.softmax_cross_entropy(fp.logits, &[2]).unwrap();
        let l = regularized_loss(&mut g, &net, &fp, &[2], &s, lambda).unwrap();
        let penalty = g.value(l).item() - g.value(ce).item();
        let mid = ManifoldSpec::line().point_on_manifold(net.bundle(), 0.5).unwrap();
        let norm_sq: f64 = mid.iter().map(Tensor::norm_sq).sum();
        let want = 0.5 * lambda * norm_sq;
        assert!((penalty - want).abs() <= 1e-12 * want.max(1e-300), "{penalty} vs {want}");
    }
}

#[test]
fn penalty_matches_per_example_norms() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for spec in verify::reference_specs() {
        let net = Network::init(NetworkSpec::mlp(2, &[5], 3, ConditioningMode::Manifold, spec), 4).unwrap();
        let s: Vec<f64> = (0..9).map(|_| rng.random_range(0.0..=1.0)).collect();
        let w = penalty_weights(&net, &s).unwrap();
        let n = spec.n_basis();
        let mut factored = 0.0;
        for e in net.bundle().entries() {
            for k in 0..n {
                for l in 0..n {
                    factored += w[k * n + l] * e.points[k].dot(&e.points[l]).unwrap();
                }
            }
        }
        let dense: f64 = s
            .iter()
            .map(|&si| si * spec.point_on_manifold(net.bundle(), si).unwrap().iter().map(Tensor::norm_sq).sum::<f64>())
            .sum::<f64>()
            / s.len() as f64;
        assert!((factored - dense).abs() <= 1e-12 * dense, "{spec}: {factored} vs {dense}");
    }
}

#[test]
fn penalty_gradients_match_finite_differences() {
    for seed in 0..100u64 {
        let spec = verify::random_spec(seed as usize, &mut ChaCha8Rng::seed_from_u64(seed));
        let (net, batch) = verify::toy_instance(spec, 9000 + seed).unwrap();
        let e = verify::network_gradient_error(&net, &batch, 0.1).unwrap();
        assert!(e <= 1e-5, "{spec} seed {seed}: {e:e}");
    }
}

#[test]
fn penalty_weights_are_zero_without_modulation() {
    let net = line_mlp(0);
    let w = penalty_weights(&net, &[0.0, 0.0, 0.0]).unwrap();
    assert!(w.iter().all(|&v| v == 0.0));
    let mut b = BasisBundle::new();
    b.push("w", vec![Tensor::zeros(&[1]); 2]).unwrap();
    assert_eq!(b.n_basis(), 2);
}

proptest! {
    #[test]
    fn rotation_round_trips(x in -10.0f64..10.0, y in -10.0f64..10.0, theta in 0.0f64..TAU) {
        let back = rotate(rotate([x, y], theta), -theta);
        prop_assert!((back[0] - x).abs() <= 1e-12 && (back[1] - y).abs() <= 1e-12);
    }

    #[test]
    fn bayes_is_rotation_equivariant(x in -6.0f64..6.0, y in -6.0f64..6.0, theta in 0.0f64..TAU) {
        let b = Blobs2d::default();
        let p = [x, y];
        // Ties sit on measure-zero sector boundaries; skip points too close to one.
        let phi = y.atan2(x).rem_euclid(TAU) * 4.0 / TAU;
        prop_assume!((phi - phi.round()).abs() > 1e-6 && ((phi - 0.5) - (phi - 0.5).round()).abs() > 1e-6);
        prop_assert_eq!(b.bayes(rotate(p, theta), theta), b.bayes(p, 0.0));
    }

    #[test]
    fn blend_is_the_convex_mixture(x in -3.0f64..3.0, eta in -3.0f64..3.0, s in 0.0f64..=1.0) {
        let v = blend(x, eta, s);
        prop_assert!((v - ((1.0 - s) * x + s * eta)).abs() == 0.0);
        prop_assert!(v >= x.min(eta) - 1e-15 && v <= x.max(eta) + 1e-15);
    }
}
