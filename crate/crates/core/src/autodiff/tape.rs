//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value and the
//! references it needs to run its local gradient rule. [`Tape::backward`]
//! walks the nodes in reverse recording order exactly once.

use super::kernels::{self, ConvGeometry};
use super::{AutodiffError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(BinaryKind, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Transpose(Var),
    Reshape(Var),
    Flip { input: Var, axis: usize },
    Softmax(Var),
    Bce { pred: Var, target: Vec<f64> },
    Conv1d { x: Var, w: Var, bias: Option<Var>, geometry: ConvGeometry },
    BlockMatVec(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single-threaded recording session.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: one gradient buffer per recorded value.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when `var` is off the
    /// differentiation path.
    pub fn wrt(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches value shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Borrowed gradient buffer, `None` when the gradient is identically zero.
    pub fn raw(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }
}

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::Shape { op, detail }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(outer, axis_len, inner)` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const BCE_CLAMP: f64 = 1e-12;

/// Lazily allocated gradient accumulator for `v`, `None` when `v` is not differentiated.
fn slot<'g>(lower: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'g mut [f64]> {
    let n = &nodes[v.0];
    if !n.needs_grad {
        return None;
    }
    Some(lower[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]).as_mut_slice())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Sign pattern (`x > 0`) of every input to a piecewise-linear op.
    /// Two evaluations with equal patterns lie on the same smooth piece.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) | Op::Abs(a) = node.op {
                pattern.extend(self.nodes[a.0].value.values().iter().map(|&x| x > 0.0));
            }
        }
        pattern
    }

    /// Records an input. Gradients are only propagated into leaves created with
    /// `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).values(), self.value(b).values(), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), needs))
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa == sb
            || self.value(b).len() == 1
            || (sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb);
        if !ok {
            let name = match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "subtract",
                BinaryKind::Mul => "hadamard",
            };
            return Err(shape_err(name, format!("{sa:?} and {sb:?}")));
        }
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let bl = bv.len();
        let out: Vec<f64> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bv[i % bl];
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                }
            })
            .collect();
        let shape = sa.to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Binary(kind, a, b), needs))
    }

    /// Elementwise sum; `b` may repeat over the leading axes of `a`, or be a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(BinaryKind::Sub, a, b)
    }

    /// Hadamard product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(BinaryKind::Mul, a, b)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let needs = self.needs(a);
        self.push(value, op, needs)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, Op::Scale(a, factor), |x| x * factor)
    }

    pub fn add_scalar(&mut self, a: Var, shift: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + shift)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).values().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a).values();
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Mean(a), needs)
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = inputs
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", format!("{base:?} with {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).values()[o * chunk..(o + 1) * chunk]);
            }
        }
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            needs,
        ))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(shape_err("slice", format!("{s:?} axis {axis} range {start}..{end}")));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let width = (end - start) * inner;
        let src = self.value(a).values();
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let off = o * len * inner + start * inner;
            out.extend_from_slice(&src[off..off + width]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { input: a, axis, start }, needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(shape_err("transpose", format!("{s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).values();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), needs))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), needs))
    }

    /// Reverses the order of entries along `axis`.
    pub fn flip(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(shape_err("flip", format!("axis {axis} for {s:?}")));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let src = self.value(a).values();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for p in 0..len {
                let from = (o * len + p) * inner;
                let to = (o * len + (len - 1 - p)) * inner;
                out[to..to + inner].copy_from_slice(&src[from..from + inner]);
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(s, out)?, Op::Flip { input: a, axis }, needs))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let s = self.shape(a).to_vec();
        let width = *s
            .last()
            .ok_or_else(|| shape_err("softmax", "rank-0 input".into()))?;
        let src = self.value(a).values();
        let mut out = vec![0.0; src.len()];
        for (row_in, row_out) in src.chunks(width).zip(out.chunks_mut(width)) {
            let max = row_in.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (o, &x) in row_out.iter_mut().zip(row_in) {
                *o = (x - max).exp();
                total += *o;
            }
            row_out.iter_mut().for_each(|o| *o /= total);
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(s, out)?, Op::Softmax(a), needs))
    }

    /// Mean binary cross-entropy of probabilities `pred` against a constant
    /// `target`: `-mean(t ln p + (1 - t) ln(1 - p))`.
    pub fn binary_cross_entropy(&mut self, pred: Var, target: &Tensor) -> Result<Var, AutodiffError> {
        let s = self.shape(pred);
        if s != target.shape() {
            return Err(shape_err(
                "binary_cross_entropy",
                format!("{s:?} vs target {:?}", target.shape()),
            ));
        }
        let p = self.value(pred).values();
        let n = p.len() as f64;
        let loss = -p
            .iter()
            .zip(target.values())
            .map(|(&p, &t)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                t * p.ln() + (1.0 - t) * (1.0 - p).ln()
            })
            .sum::<f64>()
            / n;
        let needs = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                pred,
                target: target.values().to_vec(),
            },
            needs,
        ))
    }

    /// Dilated causal convolution of `x: [in, L]` with `w: [out, in, k]` and
    /// optional `bias: [out]`. Output is `[out, L]`; positions before the
    /// start of the sequence read as zero.
    pub fn conv1d_dilated_causal(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        dilation: usize,
    ) -> Result<Var, AutodiffError> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 3 || sw[1] != sx[0] || sw[2] == 0 || dilation == 0 {
            return Err(shape_err(
                "conv1d_dilated_causal",
                format!("x {sx:?}, w {sw:?}, dilation {dilation}"),
            ));
        }
        let geometry = ConvGeometry {
            in_channels: sx[0],
            out_channels: sw[0],
            kernel: sw[2],
            dilation,
            len: sx[1],
        };
        if let Some(b) = bias {
            if self.shape(b) != [geometry.out_channels] {
                return Err(shape_err(
                    "conv1d_dilated_causal",
                    format!("bias {:?} for {} output channels", self.shape(b), geometry.out_channels),
                ));
            }
        }
        let out = kernels::conv1d_forward(
            self.value(x).values(),
            self.value(w).values(),
            bias.map(|b| self.value(b).values()),
            geometry,
        );
        let needs = self.needs(x) || self.needs(w) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Tensor::new(vec![geometry.out_channels, geometry.len], out)?,
            Op::Conv1d {
                x,
                w,
                bias,
                geometry,
            },
            needs,
        ))
    }

    /// Block-diagonal product: `w: [n, p, q]`, `h: [n, q]` gives
    /// `out[k] = w[k] · h[k]`, shape `[n, p]`.
    pub fn block_matvec(&mut self, w: Var, h: Var) -> Result<Var, AutodiffError> {
        let (sw, sh) = (self.shape(w), self.shape(h));
        if sw.len() != 3 || sh.len() != 2 || sw[0] != sh[0] || sw[2] != sh[1] {
            return Err(shape_err("block_matvec", format!("{sw:?} and {sh:?}")));
        }
        let (n, p, q) = (sw[0], sw[1], sw[2]);
        let wv = self.value(w).values();
        let hv = self.value(h).values();
        let mut out = vec![0.0; n * p];
        for k in 0..n {
            let hk = &hv[k * q..(k + 1) * q];
            for a in 0..p {
                let off = (k * p + a) * q;
                out[k * p + a] = kernels::dot(&wv[off..off + q], hk);
            }
        }
        let needs = self.needs(w) || self.needs(h);
        Ok(self.push(Tensor::new(vec![n, p], out)?, Op::BlockMatVec(w, h), needs))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            let out = node.value.values();
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    if let Some(ga) = slot(lower, &self.nodes, *a) {
                        kernels::matmul_acc_bt(g, self.value(*b).values(), ga, m, k, n);
                    }
                    if let Some(gb) = slot(lower, &self.nodes, *b) {
                        kernels::matmul_acc_at(self.value(*a).values(), g, gb, m, k, n);
                    }
                }
                Op::Binary(kind, a, b) => {
                    let av = self.value(*a).values();
                    let bv = self.value(*b).values();
                    let bl = bv.len();
                    if let Some(ga) = slot(lower, &self.nodes, *a) {
                        match kind {
                            BinaryKind::Add | BinaryKind::Sub => {
                                ga.iter_mut().zip(g).for_each(|(x, &gv)| *x += gv);
                            }
                            BinaryKind::Mul => {
                                for (idx, (x, &gv)) in ga.iter_mut().zip(g).enumerate() {
                                    *x += gv * bv[idx % bl];
                                }
                            }
                        }
                    }
                    if let Some(gb) = slot(lower, &self.nodes, *b) {
                        for (idx, &gv) in g.iter().enumerate() {
                            gb[idx % bl] += match kind {
                                BinaryKind::Add => gv,
                                BinaryKind::Sub => -gv,
                                BinaryKind::Mul => gv * av[idx],
                            };
                        }
                    }
                }
                Op::Scale(a, f) => {
                    if let Some(ga) = slot(lower, &self.nodes, *a) {
                        ga.iter_mut().zip(g).for_each(|(x, &gv)| *x += gv * f);
                    }
                }
                Op::AddScalar(a) | Op::Reshape(a) => {
                    if let Some(ga) = slot(lower, &self.nodes, *a) {
                        ga.iter_mut().zip(g).for_each(|(x, &gv)| *x += gv);
                    }
                }
                Op::Sigmoid(a) => {
                    if let Some(ga) = slot(lower, &self.nodes, *a) {
                        for ((x, &gv), &y) in ga.iter_mut().zip(g).zip(out) {
                            *x += gv * y * (1.0 - y);
                        }
                    }
                }
                Op::Tanh(a) => {
                    if let Some(ga) = slot(lower, &self.nodes, *a) {
                        for ((x, &gv), &y) in ga.iter_mut().zip(g).zip(out) {
                            *x += gv * (1.0 - y * y);
                        }
                    }
                }
                Op::Relu(a) => {
                    if let Some(ga) = slot(lower, &self.nodes, *a) {
                        for ((x, &gv), &y) in ga.iter_mut().zip(g).zip(out) {
                            if y > 0.0 {
                                *x += gv;
                            }
                        }
                    }
                }
                Op::Abs(a) => {
                    let av = self.value(*a).values();
                    if let Some(ga) = slot(lower, &self.nodes, *a) {
                        for ((x, &gv), &v) in ga.iter_mut().zip(g).zip(av) {
                            if v > 0.0 {
                                *x += gv;
                            } else if v < 0.0 {
                                *x -= gv;
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    if let Some(ga) = slot(lower, &self.nodes, *a) {
                        ga.iter_mut().for_each(|x| *x += g[0]);
                    }
                }
                Op::Mean(a) => {
                    if let Some(ga) = slot(lower, &self.nodes, *a) {
                        let share = g[0] / ga.len() as f64;
                        ga.iter_mut().for_each(|x| *x += share);
                    }
                }
                Op::Concat { inputs, axis } => {
                    let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                    let mut offset = 0;
                    for &v in inputs {
                        let width = self.shape(v)[*axis] * inner;
                        if let Some(gv) = slot(lower, &self.nodes, v) {
                            for o in 0..outer {
                                let src = o * total * inner + offset;
                                gv[o * width..(o + 1) * width]
                                    .iter_mut()
                                    .zip(&g[src..src + width])
                                    .for_each(|(x, &y)| *x += y);
                            }
                        }
                        offset += width;
                    }
                }
                Op::Slice { input, axis, start } => {
                    let (outer, len, inner) = split_axis(self.shape(*input), *axis);
                    let width = node.value.shape()[*axis] * inner;
                    if let Some(ga) = slot(lower, &self.nodes, *input) {
                        for o in 0..outer {
                            let off = o * len * inner + start * inner;
                            ga[off..off + width]
                                .iter_mut()
                                .zip(&g[o * width..(o + 1) * width])
                                .for_each(|(x, &y)| *x += y);
                        }
                    }
                }
                Op::Transpose(a) => {
                    let s = self.shape(*a);
                    let (r, c) = (s[0], s[1]);
                    if let Some(ga) = slot(lower, &self.nodes, *a) {
                        for i in 0..r {
                            for j in 0..c {
                                ga[i * c + j] += g[j * r + i];
                            }
                        }
                    }
                }
                Op::Flip { input, axis } => {
                    let (outer, len, inner) = split_axis(self.shape(*input), *axis);
                    if let Some(ga) = slot(lower, &self.nodes, *input) {
                        for o in 0..outer {
                            for p in 0..len {
                                let to = (o * len + p) * inner;
                                let from = (o * len + (len - 1 - p)) * inner;
                                for q in 0..inner {
                                    ga[to + q] += g[from + q];
                                }
                            }
                        }
                    }
                }
                Op::Softmax(a) => {
                    let width = *node.value.shape().last().expect("softmax rank >= 1");
                    if let Some(ga) = slot(lower, &self.nodes, *a) {
                        for ((gin, gout), y) in ga
                            .chunks_mut(width)
                            .zip(g.chunks(width))
                            .zip(out.chunks(width))
                        {
                            let inner = kernels::dot(gout, y);
                            for ((x, &gv), &yv) in gin.iter_mut().zip(gout).zip(y) {
                                *x += yv * (gv - inner);
                            }
                        }
                    }
                }
                Op::Bce { pred, target } => {
                    let pv = self.value(*pred).values();
                    let n = pv.len() as f64;
                    if let Some(gp) = slot(lower, &self.nodes, *pred) {
                        for ((x, &p), &t) in gp.iter_mut().zip(pv).zip(target) {
                            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                            *x += g[0] * (p - t) / (p * (1.0 - p)) / n;
                        }
                    }
                }
                Op::Conv1d {
                    x,
                    w,
                    bias,
                    geometry,
                } => {
                    let xv = self.value(*x).values();
                    let wv = self.value(*w).values();
                    let mut gx = self.needs(*x).then(|| vec![0.0; xv.len()]);
                    let mut gw = self.needs(*w).then(|| vec![0.0; wv.len()]);
                    let mut gb = bias
                        .filter(|b| self.needs(*b))
                        .map(|_| vec![0.0; geometry.out_channels]);
                    kernels::conv1d_backward(
                        xv,
                        wv,
                        g,
                        *geometry,
                        gx.as_deref_mut(),
                        gw.as_deref_mut(),
                        gb.as_deref_mut(),
                    );
                    for (v, part) in [(Some(*x), gx), (Some(*w), gw), (*bias, gb)] {
                        if let (Some(v), Some(part)) = (v, part) {
                            if let Some(dst) = slot(lower, &self.nodes, v) {
                                dst.iter_mut().zip(&part).for_each(|(d, p)| *d += p);
                            }
                        }
                    }
                }
                Op::BlockMatVec(w, h) => {
                    let sw = self.shape(*w);
                    let (n, p, q) = (sw[0], sw[1], sw[2]);
                    let wv = self.value(*w).values();
                    let hv = self.value(*h).values();
                    if let Some(gw) = slot(lower, &self.nodes, *w) {
                        for k in 0..n {
                            for a in 0..p {
                                let gka = g[k * p + a];
                                let off = (k * p + a) * q;
                                for b in 0..q {
                                    gw[off + b] += gka * hv[k * q + b];
                                }
                            }
                        }
                    }
                    if let Some(gh) = slot(lower, &self.nodes, *h) {
                        for k in 0..n {
                            for a in 0..p {
                                let gka = g[k * p + a];
                                let off = (k * p + a) * q;
                                for b in 0..q {
                                    gh[k * q + b] += gka * wv[off + b];
                                }
                            }
                        }
                    }
                }
            }
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}
