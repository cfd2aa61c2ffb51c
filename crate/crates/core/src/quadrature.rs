//! One-dimensional quadrature rules.

use std::f64::consts::PI;

/// Gauss–Legendre nodes and weights on `[-1, 1]`, found by Newton iteration on
/// the Legendre polynomial starting from the Chebyshev-like initial guesses.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "gauss_legendre needs at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Applies an `n`-point Gauss–Legendre rule on each interval between consecutive
/// `breaks`, summing the results. `f` may return several values at once.
pub fn gauss_legendre_piecewise(
    breaks: &[f64],
    points: usize,
    dim: usize,
    mut f: impl FnMut(f64, &mut [f64]),
) -> Vec<f64> {
    let (nodes, weights) = gauss_legendre(points);
    let mut total = vec![0.0; dim];
    let mut buf = vec![0.0; dim];
    for span in breaks.windows(2) {
        let (a, b) = (span[0], span[1]);
        if b <= a {
            continue;
        }
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        for (x, w) in nodes.iter().zip(&weights) {
            buf.iter_mut().for_each(|v| *v = 0.0);
            f(mid + half * x, &mut buf);
            for (t, v) in total.iter_mut().zip(&buf) {
                *t += w * half * v;
            }
        }
    }
    total
}

/// Composite Simpson rule over `[a, b]` with `intervals` (even) sub-intervals.
pub fn simpson(a: f64, b: f64, intervals: usize, dim: usize, mut f: impl FnMut(f64, &mut [f64])) -> Vec<f64> {
    assert!(intervals >= 2 && intervals % 2 == 0, "simpson needs an even interval count");
    let h = (b - a) / intervals as f64;
    let mut total = vec![0.0; dim];
    let mut buf = vec![0.0; dim];
    for i in 0..=intervals {
        let w = if i == 0 || i == intervals {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        buf.iter_mut().for_each(|v| *v = 0.0);
        f(a + h * i as f64, &mut buf);
        for (t, v) in total.iter_mut().zip(&buf) {
            *t += w * v;
        }
    }
    total.iter_mut().for_each(|t| *t *= h / 3.0);
    total
}
