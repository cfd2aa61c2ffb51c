//! Conditioned task generators and the s-scaled regularized loss.
//!
//! Every batch is a pure function of `(TaskSpec, split, batch index, size)`.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::network::{ConditioningMode, ForwardPass, Network};
use crate::tensor::Tensor;

pub const ANGLE_GRID: usize = 360;
pub const DEFAULT_L2: f64 = 1e-4;
pub const DEFAULT_MAX_NOISE: f64 = 1.0;

/// Number of condition buckets reported by the harness.
pub const BUCKETS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskFamily {
    Rotation,
    Noise,
}

impl TaskFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskFamily::Rotation => "rotation",
            TaskFamily::Noise => "noise",
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rotation" => Ok(TaskFamily::Rotation),
            "noise" => Ok(TaskFamily::Noise),
            other => Err(Error::config(format!("unknown task family '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dataset {
    Blobs2d,
    Digits16,
}

impl Dataset {
    pub fn as_str(self) -> &'static str {
        match self {
            Dataset::Blobs2d => "blobs2d",
            Dataset::Digits16 => "digits16",
        }
    }

    pub fn input_shape(self) -> Vec<usize> {
        match self {
            Dataset::Blobs2d => vec![2],
            Dataset::Digits16 => vec![1, DIGIT_SIZE, DIGIT_SIZE],
        }
    }

    pub fn classes(self) -> usize {
        match self {
            Dataset::Blobs2d => Blobs2d::default().classes,
            Dataset::Digits16 => 10,
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs2d" => Ok(Dataset::Blobs2d),
            "digits16" => Ok(Dataset::Digits16),
            other => Err(Error::config(format!("unknown dataset '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Inputs, labels and per-example modulators.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionedBatch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub s: Vec<f64>,
}

impl ConditionedBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: TaskFamily,
    pub dataset: Dataset,
    /// Fraction of the angle grid seen in training (rotation only).
    pub sparsity: f64,
    pub grid: usize,
    /// Upper end of the noise-level range (noise only).
    pub max_noise: f64,
    pub seed: u64,
}

impl TaskSpec {
    pub fn rotation(dataset: Dataset, sparsity: f64, seed: u64) -> Self {
        Self { family: TaskFamily::Rotation, dataset, sparsity, grid: ANGLE_GRID, max_noise: DEFAULT_MAX_NOISE, seed }
    }

    pub fn noise(dataset: Dataset, max_noise: f64, seed: u64) -> Self {
        Self { family: TaskFamily::Noise, dataset, sparsity: 1.0, grid: ANGLE_GRID, max_noise, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return Err(Error::config(format!("task.sparsity must lie in (0, 1], got {}", self.sparsity)));
        }
        if self.family == TaskFamily::Rotation && self.sparsity * (self.grid as f64) < 1.0 {
            return Err(Error::config(format!(
                "task.sparsity × task.grid must be at least 1, got {} × {}",
                self.sparsity, self.grid
            )));
        }
        if !(self.max_noise > 0.0 && self.max_noise <= 1.0) {
            return Err(Error::config(format!("task.max_noise must lie in (0, 1], got {}", self.max_noise)));
        }
        Ok(())
    }

    /// Number of grid angles in the training subset.
    pub fn train_angle_count(&self) -> usize {
        ((self.sparsity * self.grid as f64).ceil() as usize).clamp(1, self.grid)
    }
}

/// Gaussian blobs centered in `classes` equal sectors of the plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blobs2d {
    pub classes: usize,
    pub radius: f64,
    pub sigma: f64,
}

impl Default for Blobs2d {
    fn default() -> Self {
        Self { classes: 4, radius: 3.0, sigma: 0.6 }
    }
}

impl Blobs2d {
    pub fn center(&self, class: usize) -> [f64; 2] {
        let phi = TAU * class as f64 / self.classes as f64;
        [self.radius * phi.cos(), self.radius * phi.sin()]
    }

    pub fn sample<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> [f64; 2] {
        let [cx, cy] = self.center(class);
        let nx: f64 = rng.sample(StandardNormal);
        let ny: f64 = rng.sample(StandardNormal);
        [cx + self.sigma * nx, cy + self.sigma * ny]
    }

    /// Maximum-likelihood class of `p` under the mixture rotated by `theta`.
    pub fn bayes(&self, p: [f64; 2], theta: f64) -> usize {
        let q = rotate(p, -theta);
        let mut best = (f64::INFINITY, 0);
        for c in 0..self.classes {
            let [cx, cy] = self.center(c);
            let d = (q[0] - cx).powi(2) + (q[1] - cy).powi(2);
            if d < best.0 {
                best = (d, c);
            }
        }
        best.1
    }
}

pub fn rotate(p: [f64; 2], theta: f64) -> [f64; 2] {
    if theta == 0.0 {
        return p;
    }
    let (s, c) = theta.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

pub const DIGIT_SIZE: usize = 16;
/// Affine pixel normalization applied after resampling: `(v - mean) / std`.
pub const DIGIT_MEAN: f64 = 0.21;
pub const DIGIT_STD: f64 = 0.29;

static DIGITS_ASSET: &[u8] = include_bytes!("../assets/digits16.bin");

/// The bundled glyph templates, intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Digits {
    pub height: usize,
    pub width: usize,
    pub glyphs: Vec<Vec<f64>>,
}

impl Digits {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::format("digits asset truncated");
        if bytes.get(..4) != Some(b"DG16") {
            return Err(Error::format("digits asset has bad magic"));
        }
        let u16_at = |o: usize| bytes.get(o..o + 2).map(|b| u16::from_le_bytes([b[0], b[1]]) as usize).ok_or_else(bad);
        let version = u16_at(4)?;
        if version != 1 {
            return Err(Error::format(format!("unsupported digits asset version {version}")));
        }
        let (count, height, width) = (u16_at(6)?, u16_at(8)?, u16_at(10)?);
        let body = &bytes[12..];
        if body.len() != count * height * width {
            return Err(bad());
        }
        let glyphs = body.chunks(height * width).map(|g| g.iter().map(|&v| v as f64 / 255.0).collect()).collect();
        Ok(Self { height, width, glyphs })
    }

    pub fn bundled() -> &'static Digits {
        static CELL: OnceLock<Digits> = OnceLock::new();
        CELL.get_or_init(|| Digits::parse(DIGITS_ASSET).expect("bundled digits asset is valid"))
    }

    fn pixel(&self, glyph: usize, r: isize, c: isize) -> f64 {
        if r < 0 || c < 0 || r >= self.height as isize || c >= self.width as isize {
            0.0
        } else {
            self.glyphs[glyph][r as usize * self.width + c as usize]
        }
    }

    /// Bilinear sample at fractional `(row, col)`; zero outside the image.
    pub fn bilinear(&self, glyph: usize, row: f64, col: f64) -> f64 {
        let (r0, c0) = (row.floor(), col.floor());
        let (fr, fc) = (row - r0, col - c0);
        let (r0, c0) = (r0 as isize, c0 as isize);
        (1.0 - fr) * ((1.0 - fc) * self.pixel(glyph, r0, c0) + fc * self.pixel(glyph, r0, c0 + 1))
            + fr * ((1.0 - fc) * self.pixel(glyph, r0 + 1, c0) + fc * self.pixel(glyph, r0 + 1, c0 + 1))
    }

    /// Renders `glyph` rotated by `theta` about the image center after a small
    /// random shift, scale and tilt, then normalizes the pixels.
    pub fn render<R: Rng + ?Sized>(&self, glyph: usize, theta: f64, rng: &mut R, out: &mut [f64]) {
        let shift = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let scale: f64 = rng.random_range(0.9..1.1);
        let tilt: f64 = rng.random_range(-0.1..0.1);
        let cy = (self.height as f64 - 1.0) / 2.0;
        let cx = (self.width as f64 - 1.0) / 2.0;
        for r in 0..self.height {
            for c in 0..self.width {
                // Inverse map from output pixel to template coordinates.
                let p = rotate([c as f64 - cx, r as f64 - cy], -(theta + tilt));
                let sx = (p[0] - shift[0]) / scale + cx;
                let sy = (p[1] - shift[1]) / scale + cy;
                let v = self.bilinear(glyph, sy, sx);
                out[r * self.width + c] = (v - DIGIT_MEAN) / DIGIT_STD;
            }
        }
    }
}

/// A task with its training-angle subset drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    spec: TaskSpec,
    blobs: Blobs2d,
    train_angles: Vec<usize>,
}

const TAG_ANGLES: u64 = 0x616e_676c_6573;
const TAG_TRAIN: u64 = 0x7472_6169_6e;
const TAG_TEST: u64 = 0x7465_7374;

/// SplitMix64 finalizer over a combined word; used to derive independent
/// stream seeds from `(seed, tag, index)`.
pub fn mix_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed ^ tag.rotate_left(17) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Task {
    pub fn new(spec: TaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, TAG_ANGLES, 0));
        let mut train_angles = index::sample(&mut rng, spec.grid, spec.train_angle_count()).into_vec();
        train_angles.sort_unstable();
        Ok(Self { spec, blobs: Blobs2d::default(), train_angles })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn blobs(&self) -> &Blobs2d {
        &self.blobs
    }

    pub fn input_shape(&self) -> Vec<usize> {
        self.spec.dataset.input_shape()
    }

    pub fn classes(&self) -> usize {
        self.spec.dataset.classes()
    }

    /// Sorted grid indices of the training angles.
    pub fn train_angles(&self) -> &[usize] {
        &self.train_angles
    }

    pub fn angle(&self, grid_index: usize) -> f64 {
        TAU * grid_index as f64 / self.spec.grid as f64
    }

    /// Smallest circular distance (radians) from `theta` to a training angle.
    pub fn angular_distance_to_train(&self, theta: f64) -> f64 {
        self.train_angles
            .iter()
            .map(|&j| {
                let d = (theta - self.angle(j)).rem_euclid(TAU);
                d.min(TAU - d)
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Largest over the full test grid of the distance to the training set.
    pub fn max_test_gap(&self) -> f64 {
        (0..self.spec.grid).map(|j| self.angular_distance_to_train(self.angle(j))).fold(0.0, f64::max)
    }

    /// Decile of `s` relative to its range for this task.
    pub fn condition_bucket(&self, s: f64) -> usize {
        let u = match self.spec.family {
            TaskFamily::Rotation => s,
            TaskFamily::Noise => s / self.spec.max_noise,
        };
        ((u * BUCKETS as f64) as usize).min(BUCKETS - 1)
    }

    /// Batch `index` of `split`.
    pub fn batch(&self, split: Split, index: u64, size: usize) -> Result<ConditionedBatch> {
        let tag = match split {
            Split::Train => TAG_TRAIN,
            Split::Test => TAG_TEST,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.spec.seed, tag, index));
        let shape = self.input_shape();
        let width: usize = shape.iter().product();
        let mut data = vec![0.0; size * width];
        let mut labels = Vec::with_capacity(size);
        let mut s = Vec::with_capacity(size);
        let classes = self.classes();
        for row in data.chunks_mut(width) {
            let label = rng.random_range(0..classes);
            match self.spec.family {
                TaskFamily::Rotation => {
                    let j = match split {
                        Split::Train => self.train_angles[rng.random_range(0..self.train_angles.len())],
                        Split::Test => rng.random_range(0..self.spec.grid),
                    };
                    let theta = self.angle(j);
                    self.base_example(label, theta, &mut rng, row);
                    s.push(j as f64 / self.spec.grid as f64);
                }
                TaskFamily::Noise => {
                    let level = rng.random_range(0.0..=self.spec.max_noise);
                    self.noisy_example(label, level, &mut rng, row);
                    s.push(level);
                }
            }
            labels.push(label);
        }
        let mut full = vec![size];
        full.extend(shape);
        Ok(ConditionedBatch { inputs: Tensor::new(&full, data)?, labels, s })
    }

    /// Clean example of class `label` rotated by `theta`.
    pub fn base_example<R: Rng + ?Sized>(&self, label: usize, theta: f64, rng: &mut R, out: &mut [f64]) {
        match self.spec.dataset {
            Dataset::Blobs2d => {
                let p = rotate(self.blobs.sample(label, rng), theta);
                out.copy_from_slice(&p);
            }
            Dataset::Digits16 => Digits::bundled().render(label, theta, rng, out),
        }
    }

    /// Unrotated example blended with standard normal noise at `level`.
    pub fn noisy_example<R: Rng + ?Sized>(&self, label: usize, level: f64, rng: &mut R, out: &mut [f64]) {
        self.base_example(label, 0.0, rng, out);
        for v in out.iter_mut() {
            let eta: f64 = rng.sample(StandardNormal);
            *v = blend(*v, eta, level);
        }
    }
}

/// `(1 − s)·x + s·η`
pub fn blend(x: f64, eta: f64, s: f64) -> f64 {
    (1.0 - s) * x + s * eta
}

/// Mean cross-entropy plus `λ/B · Σ_i s_i ‖M(s_i, P)‖²`.
///
/// The penalty expands `‖Σ_k a_k P_k‖² = Σ_{k,l} a_k a_l ⟨P_k, P_l⟩`, so only
/// pairwise inner products of basis points enter the graph.
pub fn regularized_loss(
    g: &mut Graph,
    net: &Network,
    fp: &ForwardPass,
    labels: &[usize],
    s: &[f64],
    lambda: f64,
) -> Result<Var> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::config(format!("l2 weight must be non-negative, got {lambda}")));
    }
    let ce = g.softmax_cross_entropy(fp.logits, labels)?;
    if lambda == 0.0 {
        return Ok(ce);
    }
    if net.spec().mode != ConditioningMode::Manifold {
        return Err(Error::contract(format!(
            "s-scaled L2 needs manifold conditioning, network uses {}",
            net.spec().mode
        )));
    }
    if s.len() != labels.len() {
        return Err(Error::Dimension { op: "regularized_loss", lhs: vec![labels.len()], rhs: vec![s.len()] });
    }
    let weights = penalty_weights(net, s)?;
    let n = net.manifold().n_basis();
    let mut terms = Vec::new();
    let mut coeffs = Vec::new();
    for vars in &fp.params {
        for k in 0..n {
            for l in k..n {
                let w = if k == l { weights[k * n + l] } else { 2.0 * weights[k * n + l] };
                if w != 0.0 {
                    terms.push(g.dot(vars[k], vars[l])?);
                    coeffs.push(lambda * w);
                }
            }
        }
    }
    if terms.is_empty() {
        return Ok(ce);
    }
    let penalty = g.linear_combination(&terms, &coeffs)?;
    g.add(ce, penalty)
}

/// `W_kl = (1/B) Σ_i s_i a_k(s_i) a_l(s_i)`, row-major.
pub fn penalty_weights(net: &Network, s: &[f64]) -> Result<Vec<f64>> {
    let n = net.manifold().n_basis();
    let a = net.manifold().coefficient_matrix(s)?;
    let mut w = vec![0.0; n * n];
    for (row, &si) in a.data().chunks(n).zip(s) {
        for k in 0..n {
            for l in 0..n {
                w[k * n + l] += si * row[k] * row[l];
            }
        }
    }
    let b = s.len().max(1) as f64;
    w.iter_mut().for_each(|v| *v /= b);
    Ok(w)
}
