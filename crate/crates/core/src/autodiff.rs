//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its output value and
//! whatever the backward rule needs. Nodes are appended in evaluation order, so
//! the recorded graph is acyclic by construction and a single reverse sweep over
//! the node list visits each node exactly once.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    MaxPool2 { input: Var, argmax: Vec<usize> },
    Reshape(Var),
    Conv2d(Var, Var),
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Sum(Var),
    Dot(Var, Var),
    MixRows { inputs: Vec<Var>, coeffs: Tensor },
    LinearCombination { inputs: Vec<Var>, coeffs: Vec<f64> },
    ConcatCols(Var, Var),
    Gather { table: Var, indices: Vec<usize> },
}

/// Operation kinds, for instrumentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    AddBias,
    Scale,
    Relu,
    MaxPool2,
    Reshape,
    Conv2d,
    SoftmaxCrossEntropy,
    Sum,
    Dot,
    MixRows,
    LinearCombination,
    ConcatCols,
    Gather,
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(..) => OpKind::Relu,
            Op::MaxPool2 { .. } => OpKind::MaxPool2,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Conv2d(..) => OpKind::Conv2d,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::Sum(..) => OpKind::Sum,
            Op::Dot(..) => OpKind::Dot,
            Op::MixRows { .. } => OpKind::MixRows,
            Op::LinearCombination { .. } => OpKind::LinearCombination,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::Gather { .. } => OpKind::Gather,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of a backward sweep: one accumulated gradient per node that
/// participates in the differentiated computation.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, or zeros of its shape when nothing flowed into it.
    pub fn wrt(&self, var: Var) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Number of recorded nodes of the given kind.
    pub fn count(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    /// Shapes of all leaf nodes that require gradients.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Leaf) && n.requires_grad)
            .map(|n| n.value.shape().to_vec())
            .collect()
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        let requires_grad = self.inputs_require_grad(&op);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn inputs_require_grad(&self, op: &Op) -> bool {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddBias(a, b) | Op::Dot(a, b) => rg(a) || rg(b),
            Op::Conv2d(a, b) | Op::ConcatCols(a, b) => rg(a) || rg(b),
            Op::Scale(a, _) | Op::Relu(a) | Op::Reshape(a) | Op::Sum(a) => rg(a),
            Op::MaxPool2 { input, .. } => rg(input),
            Op::SoftmaxCrossEntropy { logits, .. } => rg(logits),
            Op::MixRows { inputs, .. } | Op::LinearCombination { inputs, .. } => {
                inputs.iter().any(rg)
            }
            Op::Gather { table, .. } => rg(table),
        }
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push(out, Op::Add(a, b), "add")
    }

    /// Adds a per-feature bias: `[B×n] + [n]`, or `[B×F×H×W] + [F]` per channel.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        let ok = sb.len() == 1 && sx.len() >= 2 && sx[1] == sb[0];
        if !ok {
            return Err(Error::Dimension { op: "add_bias", lhs: sx, rhs: sb });
        }
        let inner: usize = sx[2..].iter().product();
        let channels = sb[0];
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b[(i / inner) % channels];
        }
        self.push(out, Op::AddBias(x, bias), "add_bias")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).scale(c);
        self.push(out, Op::Scale(x, c), "scale")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(x), "relu")
    }

    /// 2×2 max pooling with stride 2 over the trailing two axes of `[B×C×H×W]`.
    /// Odd trailing rows/columns are dropped.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::Dimension { op: "maxpool2x2", lhs: s, rhs: vec![2, 2] });
        }
        let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(bc * oh * ow);
        let mut argmax = Vec::with_capacity(bc * oh * ow);
        for plane in 0..bc {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let t = Tensor::new(&[s[0], s[1], oh, ow], out)?;
        self.push(t, Op::MaxPool2 { input: x, argmax }, "maxpool2x2")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), "reshape")
    }

    /// Collapses everything after the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let b = s[0];
        let rest: usize = s[1..].iter().product();
        self.reshape(x, &[b, rest])
    }

    /// Valid-padding, stride-1 cross-correlation of `[B×C×H×W]` with `[F×C×Kh×Kw]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] || sk[2] > sx[2] || sk[3] > sx[3] {
            return Err(Error::Dimension { op: "conv2d", lhs: sx, rhs: sk });
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (f, kh, kw) = (sk[0], sk[2], sk[3]);
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let xd = self.value(x).data();
        let kd = self.value(kernel).data();
        let mut out = vec![0.0; b * f * oh * ow];
        for bi in 0..b {
            for fi in 0..f {
                let o = &mut out[(bi * f + fi) * oh * ow..(bi * f + fi + 1) * oh * ow];
                for ci in 0..c {
                    let xp = &xd[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let kv = kd[((fi * c + ci) * kh + ki) * kw + kj];
                            for oi in 0..oh {
                                let xrow = &xp[(oi + ki) * w + kj..(oi + ki) * w + kj + ow];
                                let orow = &mut o[oi * ow..(oi + 1) * ow];
                                for (ov, xv) in orow.iter_mut().zip(xrow) {
                                    *ov += kv * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(&[b, f, oh, ow], out)?;
        self.push(t, Op::Conv2d(x, kernel), "conv2d")
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Dimension { op: "softmax_cross_entropy", lhs: s, rhs: vec![labels.len()] });
        }
        let (b, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index { op: "softmax_cross_entropy", index: bad, len: k });
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; b * k];
        let mut total = 0.0;
        for i in 0..b {
            let row = &ld[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - max).exp();
                z += *p;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p /= z;
            }
            total += z.ln() - (row[labels[i]] - max);
        }
        let loss = Tensor::scalar(total / b as f64);
        let op = Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs };
        self.push(loss, op, "softmax_cross_entropy")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), "sum")
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).dot(self.value(b))?);
        self.push(out, Op::Dot(a, b), "dot")
    }

    /// Per-row mixing: `out[i] = Σ_k coeffs[i,k] · inputs[k][i]`, where every input
    /// has the same shape `[B×…]` and `coeffs` is a constant `[B×K]`.
    pub fn mix_rows(&mut self, inputs: &[Var], coeffs: Tensor) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::contract("mix_rows of no inputs"))?;
        let shape = self.shape(first).to_vec();
        let b = shape[0];
        if coeffs.shape() != [b, inputs.len()] {
            return Err(Error::Dimension { op: "mix_rows", lhs: shape, rhs: coeffs.shape().to_vec() });
        }
        for &v in inputs {
            self.value(first).check_same_shape(self.value(v), "mix_rows")?;
        }
        let stride = self.value(first).len() / b;
        let kn = inputs.len();
        let cd = coeffs.data();
        let mut out = vec![0.0; b * stride];
        for (k, &v) in inputs.iter().enumerate() {
            let vd = self.value(v).data();
            for i in 0..b {
                let a = cd[i * kn + k];
                for (o, x) in out[i * stride..(i + 1) * stride].iter_mut().zip(&vd[i * stride..(i + 1) * stride]) {
                    *o += a * x;
                }
            }
        }
        let t = Tensor::new(&shape, out)?;
        self.push(t, Op::MixRows { inputs: inputs.to_vec(), coeffs }, "mix_rows")
    }

    /// `Σ_k coeffs[k] · inputs[k]` over same-shaped inputs.
    pub fn linear_combination(&mut self, inputs: &[Var], coeffs: &[f64]) -> Result<Var> {
        if inputs.is_empty() || inputs.len() != coeffs.len() {
            return Err(Error::contract(format!(
                "linear_combination: {} inputs, {} coefficients",
                inputs.len(),
                coeffs.len()
            )));
        }
        let mut out = Tensor::zeros(self.shape(inputs[0]));
        for (&v, &c) in inputs.iter().zip(coeffs) {
            out.axpy(c, self.value(v))?;
        }
        let op = Op::LinearCombination { inputs: inputs.to_vec(), coeffs: coeffs.to_vec() };
        self.push(out, op, "linear_combination")
    }

    /// `[B×n₁] ‖ [B×n₂] → [B×(n₁+n₂)]`
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::Dimension { op: "concat_cols", lhs: sa, rhs: sb });
        }
        let (rows, n1, n2) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(rows * (n1 + n2));
        for i in 0..rows {
            out.extend_from_slice(&ad[i * n1..(i + 1) * n1]);
            out.extend_from_slice(&bd[i * n2..(i + 1) * n2]);
        }
        let t = Tensor::new(&[rows, n1 + n2], out)?;
        self.push(t, Op::ConcatCols(a, b), "concat_cols")
    }

    /// Row lookup into a `[V×D]` table.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::Dimension { op: "gather", lhs: s, rhs: vec![indices.len()] });
        }
        let (v, d) = (s[0], s[1]);
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= v {
                return Err(Error::Index { op: "gather", index: i, len: v });
            }
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(&[indices.len(), d], out)?;
        self.push(t, Op::Gather { table, indices: indices.to_vec() }, "gather")
    }

    /// Gradients of a scalar `loss` with respect to every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 || !shape.is_empty() {
            return Err(Error::contract(format!(
                "backward() needs a scalar loss, got shape {shape:?}"
            )));
        }
        self.backward_with(loss, Tensor::scalar(1.0))
    }

    /// Vector–Jacobian product seeded with `upstream` at `root`.
    pub fn backward_with(&self, root: Var, upstream: Tensor) -> Result<Gradients> {
        self.value(root).check_same_shape(&upstream, "backward_with")?;
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(upstream);

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => existing.axpy(1.0, &g),
                slot @ None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        }

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(up) = grads[idx].take() else { continue };
            let need = |v: &Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(up);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let ud = up.data();
                    if need(a) {
                        let bd = self.value(*b).data();
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            for p in 0..k {
                                let brow = &bd[p * n..(p + 1) * n];
                                da[i * k + p] = ud[i * n..(i + 1) * n].iter().zip(brow).map(|(u, b)| u * b).sum();
                            }
                        }
                        acc(&mut grads, *a, Tensor::new(&[m, k], da)?)?;
                    }
                    if need(b) {
                        let ad = self.value(*a).data();
                        let mut db = vec![0.0; k * n];
                        for i in 0..m {
                            for p in 0..k {
                                let av = ad[i * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for (d, u) in db[p * n..(p + 1) * n].iter_mut().zip(&ud[i * n..(i + 1) * n]) {
                                    *d += av * u;
                                }
                            }
                        }
                        acc(&mut grads, *b, Tensor::new(&[k, n], db)?)?;
                    }
                }
                Op::Add(a, b) => {
                    if need(a) {
                        acc(&mut grads, *a, up.clone())?;
                    }
                    if need(b) {
                        acc(&mut grads, *b, up)?;
                    }
                }
                Op::AddBias(x, bias) => {
                    if need(bias) {
                        let sx = self.shape(*x);
                        let inner: usize = sx[2..].iter().product();
                        let channels = sx[1];
                        let mut db = vec![0.0; channels];
                        for (i, u) in up.data().iter().enumerate() {
                            db[(i / inner) % channels] += u;
                        }
                        acc(&mut grads, *bias, Tensor::new(&[channels], db)?)?;
                    }
                    if need(x) {
                        acc(&mut grads, *x, up)?;
                    }
                }
                Op::Scale(x, c) => acc(&mut grads, *x, up.scale(*c))?,
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let mut g = up;
                    for (gv, &v) in g.data_mut().iter_mut().zip(xv) {
                        if v <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    acc(&mut grads, *x, g)?;
                }
                Op::MaxPool2 { input, argmax } => {
                    let mut g = Tensor::zeros(self.shape(*input));
                    let gd = g.data_mut();
                    for (&src, u) in argmax.iter().zip(up.data()) {
                        gd[src] += u;
                    }
                    acc(&mut grads, *input, g)?;
                }
                Op::Reshape(x) => {
                    let g = up.reshape(self.shape(*x))?;
                    acc(&mut grads, *x, g)?;
                }
                Op::Conv2d(x, kernel) => {
                    let sx = self.shape(*x).to_vec();
                    let sk = self.shape(*kernel).to_vec();
                    let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                    let (f, kh, kw) = (sk[0], sk[2], sk[3]);
                    let (oh, ow) = (h - kh + 1, w - kw + 1);
                    let xd = self.value(*x).data();
                    let kd = self.value(*kernel).data();
                    let ud = up.data();
                    let mut dx = if need(x) { Some(vec![0.0; xd.len()]) } else { None };
                    let mut dk = if need(kernel) { Some(vec![0.0; kd.len()]) } else { None };
                    for bi in 0..b {
                        for fi in 0..f {
                            let u = &ud[(bi * f + fi) * oh * ow..(bi * f + fi + 1) * oh * ow];
                            for ci in 0..c {
                                let xoff = (bi * c + ci) * h * w;
                                for ki in 0..kh {
                                    for kj in 0..kw {
                                        let kidx = ((fi * c + ci) * kh + ki) * kw + kj;
                                        let kv = kd[kidx];
                                        let mut kacc = 0.0;
                                        for oi in 0..oh {
                                            let start = xoff + (oi + ki) * w + kj;
                                            let urow = &u[oi * ow..(oi + 1) * ow];
                                            if let Some(dx) = dx.as_mut() {
                                                for (d, uv) in dx[start..start + ow].iter_mut().zip(urow) {
                                                    *d += kv * uv;
                                                }
                                            }
                                            if dk.is_some() {
                                                kacc += xd[start..start + ow].iter().zip(urow).map(|(a, b)| a * b).sum::<f64>();
                                            }
                                        }
                                        if let Some(dk) = dk.as_mut() {
                                            dk[kidx] += kacc;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if let Some(dx) = dx {
                        acc(&mut grads, *x, Tensor::new(&sx, dx)?)?;
                    }
                    if let Some(dk) = dk {
                        acc(&mut grads, *kernel, Tensor::new(&sk, dk)?)?;
                    }
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let b = labels.len();
                    let k = probs.len() / b;
                    let scale = up.item() / b as f64;
                    let mut g = probs.clone();
                    for (i, &l) in labels.iter().enumerate() {
                        g[i * k + l] -= 1.0;
                    }
                    for v in &mut g {
                        *v *= scale;
                    }
                    acc(&mut grads, *logits, Tensor::new(&[b, k], g)?)?;
                }
                Op::Sum(x) => {
                    let g = Tensor::full(self.shape(*x), up.item());
                    acc(&mut grads, *x, g)?;
                }
                Op::Dot(a, b) => {
                    let u = up.item();
                    if need(a) {
                        acc(&mut grads, *a, self.value(*b).scale(u))?;
                    }
                    if need(b) {
                        acc(&mut grads, *b, self.value(*a).scale(u))?;
                    }
                }
                Op::MixRows { inputs, coeffs } => {
                    let shape = up.shape().to_vec();
                    let rows = shape[0];
                    let stride = up.len() / rows;
                    let kn = inputs.len();
                    let cd = coeffs.data();
                    let ud = up.data();
                    for (k, v) in inputs.iter().enumerate() {
                        if !need(v) {
                            continue;
                        }
                        let mut g = vec![0.0; ud.len()];
                        for i in 0..rows {
                            let a = cd[i * kn + k];
                            for (gv, u) in g[i * stride..(i + 1) * stride].iter_mut().zip(&ud[i * stride..(i + 1) * stride]) {
                                *gv = a * u;
                            }
                        }
                        acc(&mut grads, *v, Tensor::new(&shape, g)?)?;
                    }
                }
                Op::LinearCombination { inputs, coeffs } => {
                    for (v, &c) in inputs.iter().zip(coeffs) {
                        if need(v) {
                            acc(&mut grads, *v, up.scale(c))?;
                        }
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                    let (rows, n1, n2) = (sa[0], sa[1], sb[1]);
                    let ud = up.data();
                    if need(a) {
                        let g: Vec<f64> = (0..rows).flat_map(|i| ud[i * (n1 + n2)..i * (n1 + n2) + n1].to_vec()).collect();
                        acc(&mut grads, *a, Tensor::new(&sa, g)?)?;
                    }
                    if need(b) {
                        let g: Vec<f64> = (0..rows).flat_map(|i| ud[i * (n1 + n2) + n1..(i + 1) * (n1 + n2)].to_vec()).collect();
                        acc(&mut grads, *b, Tensor::new(&sb, g)?)?;
                    }
                }
                Op::Gather { table, indices } => {
                    let s = self.shape(*table).to_vec();
                    let d = s[1];
                    let mut g = Tensor::zeros(&s);
                    let gd = g.data_mut();
                    let ud = up.data();
                    for (row, &i) in indices.iter().enumerate() {
                        for (gv, u) in gd[i * d..(i + 1) * d].iter_mut().zip(&ud[row * d..(row + 1) * d]) {
                            *gv += u;
                        }
                    }
                    acc(&mut grads, *table, g)?;
                }
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_row_by_column() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let k = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = g.conv2d(x, k).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_delta_kernel_reproduces_interior() {
        let mut g = Graph::new();
        let input = Tensor::from_fn(&[1, 1, 5, 5], |i| i as f64);
        let mut kernel = Tensor::zeros(&[1, 1, 3, 3]);
        kernel.data_mut()[4] = 1.0;
        let x = g.constant(input.clone());
        let k = g.constant(kernel);
        let y = g.conv2d(x, k).unwrap();
        let expect: Vec<f64> = (1..4).flat_map(|r| (1..4).map(move |c| (r * 5 + c) as f64)).collect();
        assert_eq!(g.value(y).data(), expect.as_slice());
    }

    #[test]
    fn conv_kernel_larger_than_input_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 2, 2]));
        let k = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        assert!(matches!(g.conv2d(x, k), Err(Error::Dimension { .. })));
    }

    #[test]
    fn relu_maxpool_scale() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

        let p = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let m = g.maxpool2x2(p).unwrap();
        assert_eq!(g.value(m).data(), &[4.0]);

        let z = g.scale(x, 0.0).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::full(&[3, 10], 0.7));
        let l = g.softmax_cross_entropy(logits, &[0, 4, 9]).unwrap();
        assert!((g.value(l).item() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_is_stable_for_huge_logits() {
        let mut g = Graph::new();
        let logits = g.constant(t(&[1, 2], &[1000.0, 0.0]));
        let l = g.softmax_cross_entropy(logits, &[0]).unwrap();
        let v = g.value(l).item();
        assert!(v.is_finite() && v.abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(g.softmax_cross_entropy(logits, &[3]), Err(Error::Index { .. })));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn(&[2, 3, 4], |i| i as f64 * 0.1));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(x).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_scaled_loss_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn(&[4], |i| i as f64 - 1.5));
        let r = g.relu(x).unwrap();
        let d = g.dot(r, r).unwrap();
        let z = g.scale(d, 0.0).unwrap();
        let grads = g.backward(z).unwrap();
        assert!(grads.wrt(x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new();
        let x = g.param(t(&[1], &[f64::MAX]));
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn gather_and_concat() {
        let mut g = Graph::new();
        let table = g.param(Tensor::from_fn(&[4, 2], |i| i as f64));
        let rows = g.gather(table, &[3, 1, 3]).unwrap();
        assert_eq!(g.value(rows).data(), &[6.0, 7.0, 2.0, 3.0, 6.0, 7.0]);
        let other = g.constant(Tensor::ones(&[3, 1]));
        let cat = g.concat_cols(rows, other).unwrap();
        assert_eq!(g.value(cat).shape(), &[3, 3]);
        let s = g.sum(cat).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(table).data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(matches!(g.gather(table, &[4]), Err(Error::Index { .. })));
    }
}
