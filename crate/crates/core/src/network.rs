//! Manifold-parameterized networks with a factored forward pass.
//!
//! Each learnable layer holds `n` basis tensors. For a batch with per-example
//! modulators `s_i`, a layer computes the `n` basis outputs `W_k x` for the whole
//! batch and mixes them row-wise with `a_k(s_i)`. The effective weight `W(s_i)`
//! is never formed, so parameter memory stays at `n` bundles for any batch size.

pub mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::manifold::{BasisBundle, Manifold, ManifoldKind, ManifoldSpec, Modulator};
use crate::tensor::Tensor;

/// Number of bins used to discretize `s` for the embedding baseline.
pub const EMBED_BINS: usize = 64;
/// Width of the learned conditioning embedding.
pub const EMBED_WIDTH: usize = 32;
/// Scale of the initial spread between basis points, relative to the init bound.
pub const BASIS_SPREAD: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConditioningMode {
    Manifold,
    Concat,
    Embed,
    None,
}

impl ConditioningMode {
    pub const ALL: [ConditioningMode; 4] =
        [ConditioningMode::Manifold, ConditioningMode::Concat, ConditioningMode::Embed, ConditioningMode::None];

    pub fn as_str(self) -> &'static str {
        match self {
            ConditioningMode::Manifold => "manifold",
            ConditioningMode::Concat => "concat",
            ConditioningMode::Embed => "embed",
            ConditioningMode::None => "none",
        }
    }

    pub fn needs_modulator(self) -> bool {
        self != ConditioningMode::None
    }
}

impl fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConditioningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ConditioningMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown conditioning mode '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Dense { units: usize },
    Conv { filters: usize, kernel: usize },
    Relu,
    MaxPool,
    Flatten,
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Dense { units } => write!(f, "dense{units}"),
            LayerSpec::Conv { filters, kernel } => write!(f, "conv{filters}k{kernel}"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::MaxPool => f.write_str("maxpool"),
            LayerSpec::Flatten => f.write_str("flatten"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("cannot parse layer '{s}'"));
        let num = |t: &str| t.parse::<usize>().ok().filter(|&v| v > 0).ok_or_else(bad);
        match s {
            "relu" => Ok(LayerSpec::Relu),
            "maxpool" => Ok(LayerSpec::MaxPool),
            "flatten" => Ok(LayerSpec::Flatten),
            _ if s.starts_with("dense") => Ok(LayerSpec::Dense { units: num(&s[5..])? }),
            _ if s.starts_with("conv") => {
                let (f, k) = s[4..].split_once('k').ok_or_else(bad)?;
                Ok(LayerSpec::Conv { filters: num(f)?, kernel: num(k)? })
            }
            _ => Err(bad()),
        }
    }
}

/// Architecture plus conditioning strategy.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    /// Per-example input shape (without the batch axis).
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub mode: ConditioningMode,
    /// Used only in manifold mode; other modes run on a single point.
    pub manifold: ManifoldSpec,
}

impl NetworkSpec {
    /// `inputs → hidden… → classes` with ReLU between dense layers.
    pub fn mlp(inputs: usize, hidden: &[usize], classes: usize, mode: ConditioningMode, manifold: ManifoldSpec) -> Self {
        let mut layers = Vec::new();
        for &h in hidden {
            layers.push(LayerSpec::Dense { units: h });
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Dense { units: classes });
        Self { input_shape: vec![inputs], layers, mode, manifold }
    }

    /// Conv–ReLU–pool stages followed by a dense head.
    pub fn cnn(
        input_shape: [usize; 3],
        filters: &[usize],
        kernel: usize,
        dense: usize,
        classes: usize,
        mode: ConditioningMode,
        manifold: ManifoldSpec,
    ) -> Self {
        let mut layers = Vec::new();
        for &f in filters {
            layers.push(LayerSpec::Conv { filters: f, kernel });
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::MaxPool);
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Dense { units: dense });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::Dense { units: classes });
        Self { input_shape: input_shape.to_vec(), layers, mode, manifold }
    }

    /// The manifold the network actually runs on.
    pub fn effective_manifold(&self) -> ManifoldSpec {
        match self.mode {
            ConditioningMode::Manifold => self.manifold,
            _ => ManifoldSpec::point(),
        }
    }

    pub fn classes(&self) -> Result<usize> {
        match self.layers.last() {
            Some(LayerSpec::Dense { units }) => Ok(*units),
            _ => Err(Error::config("network must end in a dense layer")),
        }
    }

    /// Names and shapes of every learnable parameter, in bundle order.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::new();
        let mut conditioned = false;
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Dense { units } => {
                    if shape.len() != 1 {
                        return Err(Error::config(format!("layer {i} ({layer}) needs flat input, got {shape:?}")));
                    }
                    let mut fan_in = shape[0];
                    if !conditioned {
                        conditioned = true;
                        match self.mode {
                            ConditioningMode::Concat => fan_in += 1,
                            ConditioningMode::Embed => {
                                out.push(("embed.table".to_string(), vec![EMBED_BINS, EMBED_WIDTH]));
                                fan_in += EMBED_WIDTH;
                            }
                            _ => {}
                        }
                    }
                    out.push((format!("l{i}.weight"), vec![fan_in, units]));
                    out.push((format!("l{i}.bias"), vec![units]));
                    shape = vec![units];
                }
                LayerSpec::Conv { filters, kernel } => {
                    if shape.len() != 3 || shape[1] < kernel || shape[2] < kernel {
                        return Err(Error::config(format!("layer {i} ({layer}) cannot apply to {shape:?}")));
                    }
                    out.push((format!("l{i}.weight"), vec![filters, shape[0], kernel, kernel]));
                    out.push((format!("l{i}.bias"), vec![filters]));
                    shape = vec![filters, shape[1] - kernel + 1, shape[2] - kernel + 1];
                }
                LayerSpec::MaxPool => {
                    if shape.len() != 3 || shape[1] < 2 || shape[2] < 2 {
                        return Err(Error::config(format!("layer {i} (maxpool) cannot apply to {shape:?}")));
                    }
                    shape = vec![shape[0], shape[1] / 2, shape[2] / 2];
                }
                LayerSpec::Flatten => shape = vec![shape.iter().product()],
                LayerSpec::Relu => {}
            }
        }
        if !conditioned {
            return Err(Error::config("network has no dense layer"));
        }
        self.classes()?;
        Ok(out)
    }

    pub fn layers_string(&self) -> String {
        self.layers.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
    }

    /// Flat key–value form, as used by configs and checkpoint headers.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        let input = self.input_shape.iter().map(ToString::to_string).collect::<Vec<_>>().join("x");
        kv.insert("net.input".into(), input);
        kv.insert("net.layers".into(), self.layers_string());
        kv.insert("net.mode".into(), self.mode.to_string());
        kv.insert("manifold.kind".into(), self.manifold.kind().to_string());
        kv.insert("manifold.n_basis".into(), self.manifold.n_basis().to_string());
        kv.insert("manifold.periodic".into(), self.manifold.periodic().to_string());
        kv
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::config(format!("missing key {k}")));
        let input_shape = get("net.input")?
            .split('x')
            .map(|d| d.trim().parse::<usize>().map_err(|_| Error::config(format!("bad net.input dimension '{d}'"))))
            .collect::<Result<Vec<_>>>()?;
        let layers = get("net.layers")?.split(',').map(|l| l.trim().parse()).collect::<Result<Vec<_>>>()?;
        let mode = get("net.mode")?.parse()?;
        let manifold = manifold_from_kv(kv)?;
        let spec = Self { input_shape, layers, mode, manifold };
        spec.param_shapes()?;
        Ok(spec)
    }
}

pub(crate) fn manifold_from_kv(kv: &BTreeMap<String, String>) -> Result<ManifoldSpec> {
    let kind: ManifoldKind = kv
        .get("manifold.kind")
        .ok_or_else(|| Error::config("missing key manifold.kind"))?
        .parse()?;
    let n_basis = match kv.get("manifold.n_basis") {
        Some(v) => v.parse().map_err(|_| Error::config(format!("bad manifold.n_basis '{v}'")))?,
        None => ManifoldSpec::default_for(kind).n_basis(),
    };
    let periodic = match kv.get("manifold.periodic") {
        Some(v) => v.parse().map_err(|_| Error::config(format!("bad manifold.periodic '{v}'")))?,
        None => ManifoldSpec::default_for(kind).periodic(),
    };
    ManifoldSpec::new(kind, n_basis, periodic)
}

/// Vars created by one forward pass.
pub struct ForwardPass {
    pub logits: Var,
    /// Leaf vars per bundle entry, per basis point.
    pub params: Vec<Vec<Var>>,
    /// Per-example coefficient matrix `[B×n]` used for mixing.
    pub coeffs: Tensor,
}

enum Weights<'a> {
    /// Basis vars per entry and the mixing coefficients.
    Factored { vars: &'a [Vec<Var>], coeffs: &'a Tensor },
    /// One explicit tensor var per entry.
    Plain { vars: &'a [Var] },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    manifold: Manifold,
    bundle: BasisBundle,
}

impl Network {
    /// Initializes a network: the first basis point gets uniform fan-in scaled
    /// values, remaining basis points start as small perturbations around it
    /// (ellipse radii start small themselves).
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let manifold = Manifold::new(spec.effective_manifold())?;
        let shapes = spec.param_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = manifold.n_basis();
        let kind = manifold.spec().kind();
        let mut bundle = BasisBundle::new();
        for (name, shape) in &shapes {
            let bound = init_bound(name, shape);
            let base = Tensor::uniform(shape, bound, &mut rng);
            let mut points = Vec::with_capacity(n);
            points.push(base.clone());
            for _ in 1..n {
                let noise = Tensor::uniform(shape, BASIS_SPREAD * bound, &mut rng);
                let p = match kind {
                    ManifoldKind::Ellipse => noise,
                    _ => base.add(&noise)?,
                };
                points.push(p);
            }
            bundle.push(name.clone(), points)?;
        }
        Ok(Self { spec, manifold, bundle })
    }

    /// Wraps an existing bundle, checking it against `spec`.
    pub fn from_parts(spec: NetworkSpec, bundle: BasisBundle) -> Result<Self> {
        let manifold = Manifold::new(spec.effective_manifold())?;
        let shapes = spec.param_shapes()?;
        bundle.check_arity(manifold.spec())?;
        if shapes.len() != bundle.entries().len() {
            return Err(Error::contract(format!(
                "network needs {} parameters, bundle has {}",
                shapes.len(),
                bundle.entries().len()
            )));
        }
        for ((name, shape), e) in shapes.iter().zip(bundle.entries()) {
            if name != &e.name || shape.as_slice() != e.points[0].shape() {
                return Err(Error::contract(format!(
                    "parameter {name}{shape:?} does not match bundle entry {}{:?}",
                    e.name,
                    e.points[0].shape()
                )));
            }
        }
        Ok(Self { spec, manifold, bundle })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn manifold(&self) -> &Manifold {
        &self.manifold
    }

    pub fn bundle(&self) -> &BasisBundle {
        &self.bundle
    }

    pub fn bundle_mut(&mut self) -> &mut BasisBundle {
        &mut self.bundle
    }

    /// Gradient of `loss` with respect to every basis point of a factored pass,
    /// in bundle order. Unused basis points get zero gradients.
    pub fn per_basis_gradients(&self, g: &Graph, loss: Var, fp: &ForwardPass) -> Result<BasisBundle> {
        let grads = g.backward(loss)?;
        let mut out = BasisBundle::new();
        for (e, vars) in self.bundle.entries().iter().zip(&fp.params) {
            out.push(e.name.clone(), vars.iter().map(|&v| grads.wrt(v)).collect())?;
        }
        Ok(out)
    }

    fn check_inputs(&self, inputs: &Tensor, s: Option<&[f64]>) -> Result<usize> {
        let shape = inputs.shape();
        if shape.len() != self.spec.input_shape.len() + 1 || shape[1..] != self.spec.input_shape[..] {
            return Err(Error::Dimension {
                op: "forward",
                lhs: shape.to_vec(),
                rhs: self.spec.input_shape.clone(),
            });
        }
        let b = shape[0];
        match s {
            Some(s) => {
                if s.len() != b {
                    return Err(Error::Dimension { op: "forward modulators", lhs: vec![b], rhs: vec![s.len()] });
                }
                for &v in s {
                    Modulator::new(v)?;
                }
            }
            None if self.spec.mode.needs_modulator() => {
                return Err(Error::contract(format!("{} conditioning needs per-example s", self.spec.mode)));
            }
            None => {}
        }
        Ok(b)
    }

    /// Factored forward pass over the basis points. The basis tensors are
    /// registered as differentiable leaves on `g`.
    pub fn forward(&self, g: &mut Graph, inputs: &Tensor, s: Option<&[f64]>) -> Result<ForwardPass> {
        let b = self.check_inputs(inputs, s)?;
        let coeffs = match (self.spec.mode, s) {
            (ConditioningMode::Manifold, Some(s)) => self.manifold.coefficient_matrix(s)?,
            _ => Tensor::ones(&[b, 1]),
        };
        let params: Vec<Vec<Var>> = self
            .bundle
            .entries()
            .iter()
            .map(|e| e.points.iter().map(|p| g.param(p.clone())).collect())
            .collect();
        let x = g.constant(inputs.clone());
        let logits = self.run(g, x, s, Weights::Factored { vars: &params, coeffs: &coeffs })?;
        Ok(ForwardPass { logits, params, coeffs })
    }

    /// Plain forward pass with one explicit tensor per parameter (for example
    /// `M(s, P)` assembled densely). Returns the logits and the parameter vars.
    pub fn forward_plain(
        &self,
        g: &mut Graph,
        params: &[Tensor],
        inputs: &Tensor,
        s: Option<&[f64]>,
    ) -> Result<(Var, Vec<Var>)> {
        self.check_inputs(inputs, s)?;
        if params.len() != self.bundle.entries().len() {
            return Err(Error::contract(format!(
                "forward_plain got {} parameters, network has {}",
                params.len(),
                self.bundle.entries().len()
            )));
        }
        for (p, e) in params.iter().zip(self.bundle.entries()) {
            p.check_same_shape(&e.points[0], "forward_plain")?;
        }
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let x = g.constant(inputs.clone());
        let logits = self.run(g, x, s, Weights::Plain { vars: &vars })?;
        Ok((logits, vars))
    }

    fn run(&self, g: &mut Graph, mut x: Var, s: Option<&[f64]>, weights: Weights<'_>) -> Result<Var> {
        let mut entry = 0;
        let mut conditioned = false;
        for layer in &self.spec.layers {
            match *layer {
                LayerSpec::Dense { .. } => {
                    if !conditioned {
                        conditioned = true;
                        match self.spec.mode {
                            ConditioningMode::Concat => {
                                let s = s.expect("checked in check_inputs");
                                let col = g.constant(Tensor::new(&[s.len(), 1], s.to_vec())?);
                                x = g.concat_cols(x, col)?;
                            }
                            ConditioningMode::Embed => {
                                let s = s.expect("checked in check_inputs");
                                let bins: Vec<usize> = s.iter().map(|&v| embed_bin(v)).collect();
                                let table = single(&weights, entry);
                                entry += 1;
                                let e = g.gather(table, &bins)?;
                                x = g.concat_cols(x, e)?;
                            }
                            _ => {}
                        }
                    }
                    x = self.linear(g, &weights, entry, x, |g, x, w| g.matmul(x, w))?;
                    entry += 2;
                }
                LayerSpec::Conv { .. } => {
                    x = self.linear(g, &weights, entry, x, |g, x, w| g.conv2d(x, w))?;
                    entry += 2;
                }
                LayerSpec::Relu => x = g.relu(x)?,
                LayerSpec::MaxPool => x = g.maxpool2x2(x)?,
                LayerSpec::Flatten => x = g.flatten(x)?,
            }
        }
        Ok(x)
    }

    /// Weight application plus bias for one layer; `entry` indexes the weight,
    /// `entry + 1` the bias.
    fn linear(
        &self,
        g: &mut Graph,
        weights: &Weights<'_>,
        entry: usize,
        x: Var,
        apply: impl Fn(&mut Graph, Var, Var) -> Result<Var>,
    ) -> Result<Var> {
        match weights {
            Weights::Plain { vars } => {
                let y = apply(g, x, vars[entry])?;
                g.add_bias(y, vars[entry + 1])
            }
            Weights::Factored { vars, coeffs } => {
                let (w, b) = (&vars[entry], &vars[entry + 1]);
                if w.len() == 1 {
                    let y = apply(g, x, w[0])?;
                    return g.add_bias(y, b[0]);
                }
                let mut outs = Vec::with_capacity(w.len());
                for (wk, bk) in w.iter().zip(b.iter()) {
                    let y = apply(g, x, *wk)?;
                    outs.push(g.add_bias(y, *bk)?);
                }
                g.mix_rows(&outs, (*coeffs).clone())
            }
        }
    }
}

fn single(weights: &Weights<'_>, entry: usize) -> Var {
    match weights {
        Weights::Plain { vars } => vars[entry],
        Weights::Factored { vars, .. } => vars[entry][0],
    }
}

/// Bin index of `s` for the embedding baseline.
pub fn embed_bin(s: f64) -> usize {
    ((s * EMBED_BINS as f64) as usize).min(EMBED_BINS - 1)
}

fn init_bound(name: &str, shape: &[usize]) -> f64 {
    if name == "embed.table" {
        // unit variance
        return 3f64.sqrt();
    }
    if name.ends_with(".bias") {
        return 0.1;
    }
    let fan_in = if shape.len() == 4 { shape[1] * shape[2] * shape[3] } else { shape[0] };
    (6.0 / fan_in as f64).sqrt()
}

/// Index of the largest logit per row.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Draws uniform `s` for the unconditioned training mode.
pub fn random_modulators<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
}
