//! Mann–Kendall trend statistic for `y` against a covariate `x` with ties.

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrendTest {
    /// `Σ_{i<j} sgn(x_j − x_i) · sgn(y_j − y_i)`
    pub s: f64,
    pub variance: f64,
    /// Continuity-corrected standard score; positive means `y` rises with `x`.
    pub z: f64,
}

/// One-sided 5% critical value of the standard normal.
pub const Z_05: f64 = 1.6448536269514722;

pub fn mann_kendall(x: &[f64], y: &[f64]) -> TrendTest {
    assert_eq!(x.len(), y.len(), "trend test needs paired samples");
    let n = x.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += sign(x[j] - x[i]) * sign(y[j] - y[i]);
        }
    }
    let nf = n as f64;
    let (t1, t2, t3) = tie_sums(x);
    let (u1, u2, u3) = tie_sums(y);
    let mut variance = (nf * (nf - 1.0) * (2.0 * nf + 5.0) - t3 - u3) / 18.0;
    if n > 2 {
        variance += t2 * u2 / (9.0 * nf * (nf - 1.0) * (nf - 2.0));
    }
    if n > 1 {
        variance += t1 * u1 / (2.0 * nf * (nf - 1.0));
    }
    let z = if variance <= 0.0 || s == 0.0 { 0.0 } else { (s - s.signum()) / variance.sqrt() };
    TrendTest { s, variance, z }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `(Σ t(t−1), Σ t(t−1)(t−2), Σ t(t−1)(2t+5))` over tie groups of size `t`.
fn tie_sums(v: &[f64]) -> (f64, f64, f64) {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        if t > 1.0 {
            a += t * (t - 1.0);
            b += t * (t - 1.0) * (t - 2.0);
            c += t * (t - 1.0) * (2.0 * t + 5.0);
        }
        i = j;
    }
    (a, b, c)
}
