use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use wmanifold::manifold::integrated_metric_inverse;
use wmanifold::oracle::verify::{self, VerifyOptions, VerifyReport};
use wmanifold::oracle::{self, Scheme, CONVERGENCE_TOL};
use wmanifold::tensor::relative_error;
use wmanifold::{Graph, ManifoldSpec};

fn specs() -> Vec<ManifoldSpec> {
    let mut v = verify::reference_specs();
    v.push(ManifoldSpec::cubic_bspline(4, false).unwrap());
    v.push(ManifoldSpec::cubic_bspline(5, true).unwrap());
    v.push(ManifoldSpec::cubic_bspline(16, false).unwrap());
    v
}

#[test]
fn gram_examples() {
    for scheme in [Scheme::Simpson, Scheme::GaussLegendre] {
        let line = oracle::quad_gram(&ManifoldSpec::line(), scheme).unwrap().matrix;
        let want = [[1.0 / 3.0, 1.0 / 6.0], [1.0 / 6.0, 1.0 / 3.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((line[i][j] - want[i][j]).abs() <= 1e-14, "{scheme:?}");
            }
        }
        let ellipse = oracle::quad_gram(&ManifoldSpec::ellipse(), scheme).unwrap().matrix;
        let diag = [1.0, 0.5, 0.5];
        for i in 0..3 {
            for j in 0..3 {
                let w = if i == j { diag[i] } else { 0.0 };
                assert!((ellipse[i][j] - w).abs() <= 1e-13, "{scheme:?} ({i},{j})");
            }
        }
        let rod = oracle::quad_gram(&ManifoldSpec::tethered_rod(), scheme).unwrap().matrix;
        assert!((rod[1][1] - 1.0 / 3.0).abs() <= 1e-14);
    }
}

#[test]
fn rules_converge_before_they_are_trusted() {
    for spec in specs() {
        let simpson = oracle::quad_gram(&spec, Scheme::Simpson).unwrap();
        assert!(simpson.rule.nodes >= 1001 && simpson.rule.nodes % 2 == 1, "{spec}: {}", simpson.rule.nodes);
        assert!(simpson.rule.error_estimate < CONVERGENCE_TOL);
        let gl = oracle::quad_gram(&spec, Scheme::GaussLegendre).unwrap();
        assert!(gl.rule.error_estimate < CONVERGENCE_TOL);
        assert_eq!(gl.rule.scheme, Scheme::GaussLegendre);
    }
}

#[test]
fn gram_matrices_are_symmetric_and_positive_semidefinite() {
    for spec in specs() {
        let t = oracle::quad_gram(&spec, Scheme::GaussLegendre).unwrap().matrix;
        let n = t.len();
        let m = nalgebra::DMatrix::from_fn(n, n, |i, j| t[i][j]);
        assert_eq!(m, m.transpose(), "{spec}");
        assert!(m.symmetric_eigenvalues().iter().all(|&v| v >= -1e-14), "{spec}");
    }
}

#[test]
fn simpson_and_gauss_legendre_agree() {
    for spec in specs() {
        let a = oracle::quad_gram(&spec, Scheme::Simpson).unwrap().matrix;
        let b = oracle::quad_gram(&spec, Scheme::GaussLegendre).unwrap().matrix;
        for (ra, rb) in a.iter().zip(&b) {
            for (x, y) in ra.iter().zip(rb) {
                assert!((x - y).abs() <= 1e-12, "{spec}: {x} vs {y}");
            }
        }
    }
}

#[test]
fn quadrature_inverse_matches_cached_metric_inverse() {
    for spec in specs() {
        let imt = integrated_metric_inverse(&spec).unwrap();
        let t = oracle::quad_gram(&spec, Scheme::GaussLegendre).unwrap().matrix;
        let free: Vec<usize> = (0..imt.n()).filter(|&i| !imt.is_frozen(i)).collect();
        let m = nalgebra::DMatrix::from_fn(free.len(), free.len(), |r, c| t[free[r]][free[c]]);
        let inv = m.try_inverse().unwrap();
        for (r, &i) in free.iter().enumerate() {
            for (c, &j) in free.iter().enumerate() {
                assert!((inv[(r, c)] - imt.get(i, j)).abs() <= 1e-10, "{spec} ({i},{j})");
            }
        }
        assert_eq!(oracle::frozen_indices(&spec), (0..imt.n()).filter(|&i| imt.is_frozen(i)).collect::<Vec<_>>());
    }
}

#[test]
fn point_dense_update_is_the_plain_batch_gradient() {
    for seed in 0..5 {
        let (net, batch) = verify::toy_instance(ManifoldSpec::point(), seed).unwrap();
        let dense = oracle::dense_update(&net, &batch).unwrap();
        let params: Vec<_> = net.bundle().entries().iter().map(|e| e.points[0].clone()).collect();
        let mut g = Graph::new();
        let (logits, vars) = net.forward_plain(&mut g, &params, &batch.inputs, Some(&batch.s)).unwrap();
        let loss = g.softmax_cross_entropy(logits, &batch.labels).unwrap();
        let grads = g.backward(loss).unwrap();
        let plain: Vec<f64> = vars.iter().flat_map(|&v| grads.wrt(v).into_data()).collect();
        assert!(relative_error(&dense.direction, &plain, 1e-300) <= 1e-12);
        assert!(relative_error(&dense.integrated_gradient, &plain, 1e-300) <= 1e-12);
    }
}

#[test]
fn zero_gradient_field_gives_zero_update() {
    for spec in specs() {
        let d = 4;
        let dir = oracle::dense_direction(&spec, d, &vec![0.0; spec.n_basis() * d]).unwrap();
        assert!(dir.iter().all(|&v| v == 0.0), "{spec}");
    }
    assert!(oracle::dense_direction(&ManifoldSpec::line(), 3, &[0.0; 5]).is_err());
}

#[test]
fn dense_update_matches_factored_rescaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..50 {
        let spec = verify::random_spec(i, &mut rng);
        let (net, batch) = verify::toy_instance(spec, 600 + i as u64).unwrap();
        assert!(net.bundle().point_dim() <= 20);
        let imt = integrated_metric_inverse(&spec).unwrap();
        let e = verify::dense_update_error(&net, &batch, &imt).unwrap();
        assert!(e <= 1e-8, "{spec}: {e:e}");
    }
}

#[test]
fn jacobian_blocks_are_coefficient_scaled_identities() {
    let spec = ManifoldSpec::ellipse();
    let j = oracle::jacobian(&spec, 0.125, 3).unwrap();
    assert_eq!(j.shape(), (3, 9));
    let a = spec.basis_coefficients(0.125).unwrap();
    for r in 0..3 {
        for c in 0..9 {
            let want = if c % 3 == r { a[c / 3] } else { 0.0 };
            assert_eq!(j[(r, c)], want);
        }
    }
}

#[test]
fn finite_difference_of_a_quadratic_is_exact_enough() {
    let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[0] * x[1] - x[1];
    let g = oracle::finite_difference(f, &[0.5, -2.0], 1e-6);
    assert!((g[0] - (1.0 - 6.0)).abs() < 1e-8);
    assert!((g[1] - (1.5 - 1.0)).abs() < 1e-8);
}

#[test]
fn verify_passes_and_reports_every_check() {
    let report = verify::run(&VerifyOptions::default()).unwrap();
    for c in &report.checks {
        assert!(c.pass, "{} failed: {:e} > {:e}", c.name, c.max_error, c.tolerance);
    }
    assert!(report.pass);
    let names: Vec<&str> = report.checks.iter().map(|c| c.name.as_str()).collect();
    for prefix in ["gram_simpson_vs_gauss/", "metric_inverse/", "dense_update", "factored_forward", "gradient/", "kkt"] {
        assert!(names.iter().any(|n| n.starts_with(prefix)), "missing {prefix}");
    }
    assert!(report.to_string().contains("PASS"));
}

#[test]
fn verify_detects_a_corrupted_metric() {
    let opts = VerifyOptions { imt_perturbation: 1e-3, ..VerifyOptions::default() };
    let report = verify::run(&opts).unwrap();
    assert!(!report.pass);
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    assert!(failed.contains(&"metric_inverse/line"), "{failed:?}");
    assert!(failed.contains(&"metric_inverse/ellipse"), "{failed:?}");
    assert!(failed.contains(&"dense_update_equivalence"), "{failed:?}");
}

#[test]
fn verify_json_has_the_documented_schema() {
    let opts = VerifyOptions {
        dense_instances: 5,
        kkt_instances: 2,
        kkt_trials: 10,
        forward_cases: 8,
        gradient_seeds: 2,
        bayes_samples: 1000,
        ..VerifyOptions::default()
    };
    let report = verify::run(&opts).unwrap();
    let json = report.to_json();
    let v: Value = serde_json::from_str(&json).unwrap();
    let top = v.as_object().unwrap();
    assert_eq!(top.keys().collect::<Vec<_>>(), ["checks", "pass"]);
    assert!(top["pass"].is_boolean());
    for c in top["checks"].as_array().unwrap() {
        let o = c.as_object().unwrap();
        assert_eq!(o.len(), 4);
        assert!(o["name"].is_string());
        assert!(o["max_error"].is_number());
        assert!(o["tolerance"].is_number());
        assert!(o["pass"].is_boolean());
    }
    let back: VerifyReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, report);
}
