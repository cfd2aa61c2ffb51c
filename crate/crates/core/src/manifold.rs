//! Weight-space manifolds that are linear in their basis points.
//!
//! Every manifold here has the form `M(s, P) = Σ_i a_i(s) P_i`, so its Jacobian
//! with respect to `P` is `[a_1(s) I, …, a_n(s) I]` and the integrated metric is
//! `T ⊗ I` with the small Gram matrix `T_ij = ∫₀¹ a_i(s) a_j(s) ds`. The
//! steepest-descent step under a volumetric-movement constraint is then
//! `ΔP_i ∝ −Σ_j C_ij ḡ_j` with `C = T⁻¹`, and never needs the `nd × nd` matrix.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bspline::CubicBasis;
use crate::error::{Error, Result};
use crate::quadrature;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifoldKind {
    Point,
    Line,
    TetheredRod,
    Ellipse,
    CubicBspline,
}

impl ManifoldKind {
    pub const ALL: [ManifoldKind; 5] = [
        ManifoldKind::Point,
        ManifoldKind::Line,
        ManifoldKind::TetheredRod,
        ManifoldKind::Ellipse,
        ManifoldKind::CubicBspline,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ManifoldKind::Point => "point",
            ManifoldKind::Line => "line",
            ManifoldKind::TetheredRod => "tethered_rod",
            ManifoldKind::Ellipse => "ellipse",
            ManifoldKind::CubicBspline => "cubic_bspline",
        }
    }
}

impl fmt::Display for ManifoldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ManifoldKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ManifoldKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown manifold kind '{s}'")))
    }
}

/// Modulator value, guaranteed to lie in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Modulator(f64);

impl Modulator {
    pub fn new(s: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&s) {
            Ok(Self(s))
        } else {
            Err(Error::Domain(s))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifoldSpec {
    kind: ManifoldKind,
    n_basis: usize,
    periodic: bool,
}

impl ManifoldSpec {
    /// Validates the arity of `kind`. Ellipses are always periodic; the
    /// two-point and single-point kinds never are.
    pub fn new(kind: ManifoldKind, n_basis: usize, periodic: bool) -> Result<Self> {
        let (arity_ok, periodic) = match kind {
            ManifoldKind::Point => (n_basis == 1, false),
            ManifoldKind::Line | ManifoldKind::TetheredRod => (n_basis == 2, false),
            ManifoldKind::Ellipse => (n_basis == 3, true),
            ManifoldKind::CubicBspline => (n_basis >= 4, periodic),
        };
        if !arity_ok {
            return Err(Error::config(format!("{kind} manifold cannot have {n_basis} basis points")));
        }
        Ok(Self { kind, n_basis, periodic })
    }

    pub fn point() -> Self {
        Self { kind: ManifoldKind::Point, n_basis: 1, periodic: false }
    }

    pub fn line() -> Self {
        Self { kind: ManifoldKind::Line, n_basis: 2, periodic: false }
    }

    pub fn tethered_rod() -> Self {
        Self { kind: ManifoldKind::TetheredRod, n_basis: 2, periodic: false }
    }

    pub fn ellipse() -> Self {
        Self { kind: ManifoldKind::Ellipse, n_basis: 3, periodic: true }
    }

    pub fn cubic_bspline(n_basis: usize, periodic: bool) -> Result<Self> {
        Self::new(ManifoldKind::CubicBspline, n_basis, periodic)
    }

    /// Default spec for a kind (B-splines get 8 clamped control points).
    pub fn default_for(kind: ManifoldKind) -> Self {
        match kind {
            ManifoldKind::Point => Self::point(),
            ManifoldKind::Line => Self::line(),
            ManifoldKind::TetheredRod => Self::tethered_rod(),
            ManifoldKind::Ellipse => Self::ellipse(),
            ManifoldKind::CubicBspline => Self { kind, n_basis: 8, periodic: false },
        }
    }

    pub fn kind(&self) -> ManifoldKind {
        self.kind
    }

    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    pub fn periodic(&self) -> bool {
        self.periodic
    }

    /// Whether `Σ_i a_i(s) = 1` for every `s`.
    pub fn is_partition_of_unity(&self) -> bool {
        matches!(self.kind, ManifoldKind::Line | ManifoldKind::TetheredRod | ManifoldKind::CubicBspline | ManifoldKind::Point)
    }

    /// Polynomial-piece boundaries of the coefficient functions on `[0, 1]`.
    pub fn breaks(&self) -> Vec<f64> {
        match self.kind {
            ManifoldKind::CubicBspline => CubicBasis::new(self.n_basis, self.periodic).breaks(),
            _ => vec![0.0, 1.0],
        }
    }

    /// The coefficient vector `a(s)` with `M(s, P) = Σ a_i(s) P_i`.
    pub fn basis_coefficients(&self, s: f64) -> Result<Vec<f64>> {
        let s = Modulator::new(s)?.get();
        let mut out = vec![0.0; self.n_basis];
        self.coefficients_into(s, &mut out);
        Ok(out)
    }

    /// Unchecked variant of [`basis_coefficients`](Self::basis_coefficients) for hot loops
    /// where `s` has already been validated.
    pub(crate) fn coefficients_into(&self, s: f64, out: &mut [f64]) {
        match self.kind {
            ManifoldKind::Point => out[0] = 1.0,
            ManifoldKind::Line | ManifoldKind::TetheredRod => {
                out[0] = 1.0 - s;
                out[1] = s;
            }
            ManifoldKind::Ellipse => {
                // s = 1 is the same point as s = 0; avoid sin(2π) ≠ 0 round-off.
                let phase = if s >= 1.0 { 0.0 } else { s };
                let (sin, cos) = (2.0 * PI * phase).sin_cos();
                out[0] = 1.0;
                out[1] = cos;
                out[2] = sin;
            }
            ManifoldKind::CubicBspline => {
                CubicBasis::new(self.n_basis, self.periodic).eval_into(s, out);
            }
        }
    }

    /// `M(s, P)` for each parameter of the bundle.
    pub fn point_on_manifold(&self, bundle: &BasisBundle, s: f64) -> Result<Vec<Tensor>> {
        bundle.check_arity(self)?;
        let a = self.basis_coefficients(s)?;
        bundle
            .entries()
            .iter()
            .map(|e| {
                let mut out = Tensor::zeros(e.points[0].shape());
                for (p, &c) in e.points.iter().zip(&a) {
                    out.axpy(c, p)?;
                }
                Ok(out)
            })
            .collect()
    }
}

impl fmt::Display for ManifoldSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(n_basis={}, periodic={})", self.kind, self.n_basis, self.periodic)
    }
}

/// One network parameter's basis points `P_1..P_n`, all of one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisEntry {
    pub name: String,
    pub points: Vec<Tensor>,
}

/// Basis points for every parameter of a network, in a fixed order.
/// Gradients with respect to the basis points use the same structure.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct BasisBundle {
    entries: Vec<BasisEntry>,
}

impl BasisBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, points: Vec<Tensor>) -> Result<()> {
        let name = name.into();
        let first = points.first().ok_or_else(|| Error::contract(format!("parameter {name} has no basis points")))?;
        for p in &points {
            first.check_same_shape(p, "BasisBundle::push")?;
        }
        if let Some(existing) = self.entries.first() {
            if existing.points.len() != points.len() {
                return Err(Error::contract(format!(
                    "parameter {name} has {} basis points, bundle has {}",
                    points.len(),
                    existing.points.len()
                )));
            }
        }
        self.entries.push(BasisEntry { name, points });
        Ok(())
    }

    pub fn entries(&self) -> &[BasisEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [BasisEntry] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&BasisEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn n_basis(&self) -> usize {
        self.entries.first().map_or(0, |e| e.points.len())
    }

    /// Total scalar count of one basis point (the manifold's ambient dimension `d`).
    pub fn point_dim(&self) -> usize {
        self.entries.iter().map(|e| e.points[0].len()).sum()
    }

    /// A bundle with the same structure filled with zeros.
    pub fn zeros_like(&self) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|e| BasisEntry {
                name: e.name.clone(),
                points: e.points.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            })
            .collect();
        Self { entries }
    }

    pub fn check_arity(&self, spec: &ManifoldSpec) -> Result<()> {
        if self.n_basis() != spec.n_basis() {
            return Err(Error::contract(format!(
                "bundle has {} basis points per parameter but {spec} needs {}",
                self.n_basis(),
                spec.n_basis()
            )));
        }
        Ok(())
    }

    pub fn check_same_structure(&self, other: &BasisBundle) -> Result<()> {
        if self.entries.len() != other.entries.len() || self.n_basis() != other.n_basis() {
            return Err(Error::contract(format!(
                "bundle structure mismatch: {}×{} vs {}×{}",
                self.entries.len(),
                self.n_basis(),
                other.entries.len(),
                other.n_basis()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            a.points[0].check_same_shape(&b.points[0], "bundle structure")?;
        }
        Ok(())
    }

    /// Flattens basis-major: `[P_1 (all params), P_2 (all params), …]`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for k in 0..self.n_basis() {
            for e in &self.entries {
                out.extend_from_slice(e.points[k].data());
            }
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) onto this bundle's structure.
    pub fn unflatten_like(&self, flat: &[f64]) -> Result<Self> {
        let total = self.n_basis() * self.point_dim();
        if flat.len() != total {
            return Err(Error::Dimension { op: "unflatten_like", lhs: vec![total], rhs: vec![flat.len()] });
        }
        let mut out = self.clone();
        let mut off = 0;
        for k in 0..self.n_basis() {
            for e in &mut out.entries {
                let n = e.points[k].len();
                e.points[k].data_mut().copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.points.iter().all(Tensor::is_finite))
    }
}

/// Inverse integrated metric in coefficient form: the full operator is `C ⊗ I`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImtMatrix {
    n: usize,
    coeffs: Vec<f64>,
    frozen: Vec<bool>,
}

impl ImtMatrix {
    pub fn from_rows(rows: &[Vec<f64>], frozen: Vec<bool>) -> Result<Self> {
        let n = rows.len();
        if frozen.len() != n || rows.iter().any(|r| r.len() != n) {
            return Err(Error::contract("IMT matrix must be square with one frozen flag per row"));
        }
        Ok(Self { n, coeffs: rows.concat(), frozen })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.coeffs[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.coeffs[i * self.n + j] = v;
    }

    pub fn frozen(&self) -> &[bool] {
        &self.frozen
    }

    pub fn is_frozen(&self, i: usize) -> bool {
        self.frozen[i]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.coeffs.chunks(self.n).map(<[f64]>::to_vec).collect()
    }

    /// `out_i = Σ_j C_ij g_j` for one parameter's per-basis gradients; frozen outputs are zero.
    pub fn rescale(&self, grads: &[Tensor]) -> Result<Vec<Tensor>> {
        if grads.len() != self.n {
            return Err(Error::contract(format!(
                "rescale_gradients got {} basis gradients, metric has {}",
                grads.len(),
                self.n
            )));
        }
        for g in grads {
            grads[0].check_same_shape(g, "rescale_gradients")?;
        }
        let mut out = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let mut acc = Tensor::zeros(grads[0].shape());
            if !self.frozen[i] {
                for (j, g) in grads.iter().enumerate() {
                    let c = self.get(i, j);
                    if c != 0.0 {
                        acc.axpy(c, g)?;
                    }
                }
            }
            out.push(acc);
        }
        Ok(out)
    }

    /// Rescales every parameter of a gradient bundle.
    pub fn rescale_bundle(&self, grads: &BasisBundle) -> Result<BasisBundle> {
        let mut out = grads.clone();
        for e in out.entries_mut() {
            e.points = self.rescale(&e.points)?;
        }
        Ok(out)
    }
}

/// Free-function form of [`ImtMatrix::rescale`].
pub fn rescale_gradients(imt: &ImtMatrix, grads: &[Tensor]) -> Result<Vec<Tensor>> {
    imt.rescale(grads)
}

/// Coefficient Gram matrix `T_ij = ∫₀¹ a_i a_j ds` by Gauss–Legendre on each
/// polynomial piece. Eight nodes per piece integrate the degree-6 B-spline
/// products exactly.
pub fn coefficient_gram(spec: &ManifoldSpec) -> Vec<Vec<f64>> {
    let n = spec.n_basis();
    let points = match spec.kind() {
        ManifoldKind::Ellipse => 32,
        _ => 8,
    };
    let mut a = vec![0.0; n];
    let flat = quadrature::gauss_legendre_piecewise(&spec.breaks(), points, n * n, |s, out| {
        spec.coefficients_into(s, &mut a);
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = a[i] * a[j];
            }
        }
    });
    flat.chunks(n).map(<[f64]>::to_vec).collect()
}

/// The inverse integrated metric `C` for `spec`, with frozen basis indices.
pub fn integrated_metric_inverse(spec: &ManifoldSpec) -> Result<ImtMatrix> {
    match spec.kind() {
        ManifoldKind::Point => ImtMatrix::from_rows(&[vec![1.0]], vec![false]),
        ManifoldKind::Line => ImtMatrix::from_rows(&[vec![4.0, -2.0], vec![-2.0, 4.0]], vec![false, false]),
        ManifoldKind::TetheredRod => {
            ImtMatrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 3.0]], vec![true, false])
        }
        ManifoldKind::Ellipse => ImtMatrix::from_rows(
            &[vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 2.0]],
            vec![false; 3],
        ),
        ManifoldKind::CubicBspline => {
            let n = spec.n_basis();
            let gram = coefficient_gram(spec);
            let m = DMatrix::from_fn(n, n, |i, j| gram[i][j]);
            let chol = m
                .clone()
                .cholesky()
                .ok_or_else(|| Error::config(format!("Gram matrix of {spec} is not positive definite")))?;
            let inv = chol.inverse();
            let eig = m.symmetric_eigenvalues();
            let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            if lo <= hi * 1e-12 {
                return Err(Error::config(format!("Gram matrix of {spec} is numerically singular")));
            }
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..n).map(|j| 0.5 * (inv[(i, j)] + inv[(j, i)])).collect())
                .collect();
            ImtMatrix::from_rows(&rows, vec![false; n])
        }
    }
}

/// A manifold spec together with its cached inverse integrated metric.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifold {
    spec: ManifoldSpec,
    imt: ImtMatrix,
}

impl Manifold {
    pub fn new(spec: ManifoldSpec) -> Result<Self> {
        let imt = integrated_metric_inverse(&spec)?;
        Ok(Self { spec, imt })
    }

    pub fn spec(&self) -> &ManifoldSpec {
        &self.spec
    }

    pub fn imt(&self) -> &ImtMatrix {
        &self.imt
    }

    pub fn n_basis(&self) -> usize {
        self.spec.n_basis()
    }

    pub fn coefficients(&self, s: f64) -> Result<Vec<f64>> {
        self.spec.basis_coefficients(s)
    }

    /// Coefficient matrix `[B×n]` for a batch of modulators.
    pub fn coefficient_matrix(&self, s: &[f64]) -> Result<Tensor> {
        let n = self.n_basis();
        let mut data = vec![0.0; s.len() * n];
        for (row, &v) in data.chunks_mut(n).zip(s) {
            Modulator::new(v)?;
            self.spec.coefficients_into(v, row);
        }
        Tensor::new(&[s.len(), n], data)
    }
}
