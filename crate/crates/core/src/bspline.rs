//! Uniform cubic B-spline bases on `[0, 1]`, evaluated with the Cox–de Boor recursion.

const DEGREE: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct CubicBasis {
    count: usize,
    periodic: bool,
    knots: Vec<f64>,
}

impl CubicBasis {
    /// `count` control points; `count >= 4`.
    ///
    /// Clamped bases use the knot vector `[0,0,0,0, 1/m, …, (m-1)/m, 1,1,1,1]`
    /// with `m = count - 3` spans. Periodic bases place `count` spans on `[0, 1]`
    /// and wrap the cardinal cubic around so that `a(0) = a(1)`.
    pub fn new(count: usize, periodic: bool) -> Self {
        assert!(count >= DEGREE + 1, "cubic basis needs at least 4 control points");
        let knots = if periodic {
            // Integer knots for the cardinal B-spline supported on [0, 4].
            (0..=DEGREE + 1).map(|k| k as f64).collect()
        } else {
            let spans = count - DEGREE;
            let mut k = vec![0.0; DEGREE];
            k.extend((0..=spans).map(|i| i as f64 / spans as f64));
            k.extend(std::iter::repeat_n(1.0, DEGREE));
            k
        };
        Self { count, periodic, knots }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn periodic(&self) -> bool {
        self.periodic
    }

    /// Knot-span boundaries inside `[0, 1]`; each basis function is a polynomial
    /// between consecutive breaks.
    pub fn breaks(&self) -> Vec<f64> {
        let spans = if self.periodic { self.count } else { self.count - DEGREE };
        (0..=spans).map(|i| i as f64 / spans as f64).collect()
    }

    /// Writes all basis values at `s ∈ [0, 1]` into `out`.
    pub fn eval_into(&self, s: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.count);
        if self.periodic {
            let n = self.count as f64;
            let t = s * n;
            for (i, o) in out.iter_mut().enumerate() {
                // Shift so control point i peaks at s = i / count.
                let mut u = (t - i as f64 + 2.0).rem_euclid(n);
                let mut v = 0.0;
                while u < 4.0 {
                    v += cox_de_boor(&self.knots, 0, DEGREE, u, false);
                    u += n;
                }
                *o = v;
            }
        } else {
            let last = s >= 1.0;
            for (i, o) in out.iter_mut().enumerate() {
                *o = cox_de_boor(&self.knots, i, DEGREE, s, last);
            }
        }
    }

    pub fn eval(&self, s: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.count];
        self.eval_into(s, &mut out);
        out
    }
}

/// Basis function `i` of degree `p` over `knots`. `close_right` makes the last
/// non-degenerate span closed on the right so that clamped bases interpolate at 1.
fn cox_de_boor(knots: &[f64], i: usize, p: usize, u: f64, close_right: bool) -> f64 {
    if p == 0 {
        let (a, b) = (knots[i], knots[i + 1]);
        if a <= u && u < b {
            return 1.0;
        }
        if close_right && u == b && a < b && knots[i + 1..].iter().all(|&k| k == b) {
            return 1.0;
        }
        return 0.0;
    }
    let left = {
        let d = knots[i + p] - knots[i];
        if d == 0.0 {
            0.0
        } else {
            (u - knots[i]) / d * cox_de_boor(knots, i, p - 1, u, close_right)
        }
    };
    let right = {
        let d = knots[i + p + 1] - knots[i + 1];
        if d == 0.0 {
            0.0
        } else {
            (knots[i + p + 1] - u) / d * cox_de_boor(knots, i + 1, p - 1, u, close_right)
        }
    };
    left + right
}
