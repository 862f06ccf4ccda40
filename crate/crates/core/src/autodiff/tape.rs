use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use super::kernels::{self, leaky_relu, sigmoid, softplus};
use super::sparse::SparseMap;
use super::tensor::{split_axis, strides, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Neg,
    Exp,
    /// `log(1 + exp(u))`
    Softplus,
    Sigmoid,
    Relu,
    LeakyRelu(f64),
    Sqrt,
    Square,
    Abs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

/// A fused operation with a hand-written adjoint.
///
/// The forward value is computed by the caller and handed to
/// [`Tape::custom`]; the tape only needs the vector-Jacobian product.
pub trait CustomOp: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    /// Returns one optional gradient per input, each shaped like that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>>;
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Affine { x: Var, scale: f64 },
    MulConst(Var, Arc<Tensor>),
    MatMul(Var, Var),
    AddRows(Var, Var),
    Reduce { kind: ReduceKind, axis: usize, x: Var, argmax: Option<Arc<Vec<usize>>> },
    SumAll(Var),
    MeanAll(Var),
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize, end: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Expand { x: Var, axis: usize, n: usize },
    Sparse { x: Var, map: Arc<SparseMap> },
    Custom { xs: Vec<Var>, op: Arc<dyn CustomOp> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Unary(..) => "unary",
            Op::Binary(..) => "binary",
            Op::Affine { .. } => "affine",
            Op::MulConst(..) => "mul_const",
            Op::MatMul(..) => "matmul",
            Op::AddRows(..) => "add_rows",
            Op::Reduce { .. } => "reduce",
            Op::SumAll(_) => "sum_all",
            Op::MeanAll(_) => "mean_all",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Expand { .. } => "expand",
            Op::Sparse { .. } => "sparse",
            Op::Custom { op, .. } => op.name(),
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Unary(_, a)
            | Op::Affine { x: a, .. }
            | Op::MulConst(a, _)
            | Op::Reduce { x: a, .. }
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::Slice { x: a, .. }
            | Op::Reshape(a)
            | Op::Permute { x: a, .. }
            | Op::Expand { x: a, .. }
            | Op::Sparse { x: a, .. } => vec![*a],
            Op::Binary(_, a, b) | Op::MatMul(a, b) | Op::AddRows(a, b) => vec![*a, *b],
            Op::Concat { xs, .. } | Op::Custom { xs, .. } => xs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar root with respect to the tape's trainable leaves.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads.iter().map(|(v, t)| (*v, t))
    }
}

/// Wengert list of recorded operations. Nodes are appended in evaluation
/// order, so every parent precedes its children.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{what}: incompatible shapes {a:?} and {b:?}"))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Which side of every non-differentiable point the recorded values sit
    /// on: input signs of ReLU, leaky ReLU and abs, and max-reduction
    /// winners. Two evaluations with equal patterns lie in the same smooth
    /// piece.
    pub fn kink_pattern(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Unary(Unary::Relu | Unary::LeakyRelu(_) | Unary::Abs, x) => {
                    out.extend(self.nodes[x.0].value.data().iter().map(|&u| u64::from(u > 0.0)));
                }
                Op::Reduce { argmax: Some(idx), .. } => out.extend(idx.iter().map(|&i| i as u64)),
                _ => {}
            }
        }
        out
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Same values, cut from the graph: nothing upstream receives gradient
    /// through the result.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let x = self.value(a);
        let out = match kind {
            Unary::Neg => x.map(|u| -u),
            Unary::Exp => x.map(f64::exp),
            Unary::Softplus => x.map(softplus),
            Unary::Sigmoid => x.map(sigmoid),
            Unary::Relu => x.map(|u| u.max(0.0)),
            Unary::LeakyRelu(s) => x.map(|u| leaky_relu(u, s)),
            Unary::Sqrt => x.map(f64::sqrt),
            Unary::Square => x.map(|u| u * u),
            Unary::Abs => x.map(f64::abs),
        };
        self.push(out, Op::Unary(kind, a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(Unary::LeakyRelu(slope), a)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }

    /// Elementwise binary op. Shapes must match exactly, or one side must
    /// hold a single element (scalar broadcast).
    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let f = |p: f64, q: f64| match kind {
            Binary::Add => p + q,
            Binary::Sub => p - q,
            Binary::Mul => p * q,
            Binary::Div => p / q,
        };
        let out = if x.shape() == y.shape() {
            x.zip_map(y, f)
        } else if y.is_scalar() {
            let q = y.item();
            x.map(|p| f(p, q))
        } else if x.is_scalar() {
            let p = x.item();
            y.map(|q| f(p, q))
        } else {
            return Err(shape_err("elementwise", x.shape(), y.shape()));
        };
        Ok(self.push(out, Op::Binary(kind, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    /// `a * scale + shift` with constant coefficients.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(a).map(|u| u * scale + shift);
        self.push(out, Op::Affine { x: a, scale })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Arc<Tensor>) -> Result<Var> {
        let x = self.value(a);
        if x.shape() != c.shape() {
            return Err(shape_err("mul_const", x.shape(), c.shape()));
        }
        let out = x.zip_map(&c, |p, q| p * q);
        Ok(self.push(out, Op::MulConst(a, c)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.ndim() != 2 || y.ndim() != 2 || x.shape()[1] != y.shape()[0] {
            return Err(shape_err("matmul", x.shape(), y.shape()));
        }
        let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
        let out = Tensor::from_parts(vec![m, n], kernels::matmul(x.data(), y.data(), m, k, n));
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_rows(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if xv.ndim() != 2 || bv.ndim() != 1 || xv.shape()[1] != bv.shape()[0] {
            return Err(shape_err("add_rows", xv.shape(), bv.shape()));
        }
        let n = bv.numel();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n.max(1)) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRows(x, bias)))
    }

    /// Reduces along `axis`, removing it from the shape. Max routes its
    /// gradient to the first maximal element.
    pub fn reduce(&mut self, kind: ReduceKind, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.ndim() {
            return Err(Error::Axis { axis, rank: x.ndim() });
        }
        let (outer, ext, inner) = split_axis(x.shape(), axis);
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let mut out = vec![0.0; outer * inner];
        let mut argmax = None;
        let d = x.data();
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                for o in 0..outer {
                    for e in 0..ext {
                        let base = (o * ext + e) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += d[base + i];
                        }
                    }
                }
                if kind == ReduceKind::Mean && ext > 0 {
                    let s = 1.0 / ext as f64;
                    out.iter_mut().for_each(|v| *v *= s);
                }
            }
            ReduceKind::Max => {
                if ext == 0 {
                    return Err(Error::Shape("max over an empty axis".into()));
                }
                let mut idx = vec![0usize; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = d[o * ext * inner + i];
                        let mut bi = 0;
                        for e in 1..ext {
                            let v = d[(o * ext + e) * inner + i];
                            if v > best {
                                best = v;
                                bi = e;
                            }
                        }
                        out[o * inner + i] = best;
                        idx[o * inner + i] = bi;
                    }
                }
                argmax = Some(Arc::new(idx));
            }
        }
        let out = Tensor::from_parts(shape, out);
        Ok(self.push(out, Op::Reduce { kind, axis, x: a, argmax }))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.sum() / x.numel().max(1) as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(a))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*xs.first().ok_or_else(|| Error::invalid("concat of nothing"))?);
        let rank = first.ndim();
        if axis >= rank {
            return Err(Error::Axis { axis, rank });
        }
        let base = first.shape().to_vec();
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != rank || s.iter().enumerate().any(|(i, &e)| i != axis && e != base[i]) {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat { xs: xs.to_vec(), axis }))
    }

    /// Half-open `[start, end)` range along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.ndim() {
            return Err(Error::Axis { axis, rank: x.ndim() });
        }
        if start > end || end > x.shape()[axis] {
            return Err(Error::Shape(format!(
                "slice {start}..{end} out of range for axis {axis} of {:?}",
                x.shape()
            )));
        }
        let (outer, ext, inner) = split_axis(x.shape(), axis);
        let len = end - start;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner;
            out.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Slice { x: a, axis, start, end }))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let out = permute_tensor(x, perm)?;
        Ok(self.push(out, Op::Permute { x: a, perm: perm.to_vec() }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.permute(a, &[1, 0])
    }

    /// Inserts a new axis at `axis` holding `n` copies of the input.
    pub fn expand(&mut self, a: Var, axis: usize, n: usize) -> Result<Var> {
        let x = self.value(a);
        if axis > x.ndim() {
            return Err(Error::Axis { axis, rank: x.ndim() });
        }
        let outer: usize = x.shape()[..axis].iter().product();
        let inner: usize = x.shape()[axis..].iter().product();
        let mut out = Vec::with_capacity(x.numel() * n);
        for o in 0..outer {
            let chunk = &x.data()[o * inner..(o + 1) * inner];
            for _ in 0..n {
                out.extend_from_slice(chunk);
            }
        }
        let mut shape = x.shape().to_vec();
        shape.insert(axis, n);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Expand { x: a, axis, n }))
    }

    /// Applies a fixed linear map to the flattened input.
    pub fn sparse(&mut self, a: Var, map: Arc<SparseMap>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let x = self.value(a);
        if map.cols() != x.numel() || map.rows() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "sparse map {}x{} cannot take {:?} to {:?}",
                map.rows(),
                map.cols(),
                x.shape(),
                shape
            )));
        }
        let out = Tensor::from_parts(shape, map.apply(x.data()));
        Ok(self.push(out, Op::Sparse { x: a, map }))
    }

    /// Records a fused op whose forward value the caller already computed.
    pub fn custom(&mut self, xs: &[Var], output: Tensor, op: Arc<dyn CustomOp>) -> Var {
        self.push(output, Op::Custom { xs: xs.to_vec(), op })
    }

    /// Reverse sweep from a scalar root. Returns gradients for every leaf
    /// created with `requires_grad` that the root depends on.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        let mut out = Gradients::default();
        if !self.nodes[root.0].requires_grad {
            return Ok(out);
        }
        grads[root.0] = Some(Tensor::full(rv.shape().to_vec(), 1.0));
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                out.grads.insert(Var(id), g);
                continue;
            }
            for (p, pg) in self.vjp(id, &g)? {
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(out)
    }

    fn vjp(&self, id: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[id];
        let y = &node.value;
        let val = |v: Var| self.value(v);
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Unary(kind, a) => {
                let x = val(*a);
                let d = match *kind {
                    Unary::Neg => g.map(|q| -q),
                    Unary::Exp => g.zip_map(y, |q, e| q * e),
                    Unary::Softplus => g.zip_map(x, |q, u| q * sigmoid(u)),
                    Unary::Sigmoid => g.zip_map(y, |q, s| q * s * (1.0 - s)),
                    Unary::Relu => g.zip_map(x, |q, u| if u > 0.0 { q } else { 0.0 }),
                    Unary::LeakyRelu(s) => g.zip_map(x, |q, u| if u > 0.0 { q } else { q * s }),
                    Unary::Sqrt => g.zip_map(y, |q, r| 0.5 * q / r),
                    Unary::Square => g.zip_map(x, |q, u| 2.0 * q * u),
                    Unary::Abs => g.zip_map(x, |q, u| {
                        if u > 0.0 {
                            q
                        } else if u < 0.0 {
                            -q
                        } else {
                            0.0
                        }
                    }),
                };
                vec![(*a, d)]
            }
            Op::Binary(kind, a, b) => {
                let (x, z) = (val(*a), val(*b));
                // Per-element partials with scalar broadcast resolved.
                let n = y.numel();
                let xa = |i: usize| if x.is_scalar() && n != 1 { x.item() } else { x.data()[i] };
                let zb = |i: usize| if z.is_scalar() && n != 1 { z.item() } else { z.data()[i] };
                let gd = g.data();
                let (da, db): (Vec<f64>, Vec<f64>) = match kind {
                    Binary::Add => (gd.to_vec(), gd.to_vec()),
                    Binary::Sub => (gd.to_vec(), gd.iter().map(|q| -q).collect()),
                    Binary::Mul => (
                        (0..n).map(|i| gd[i] * zb(i)).collect(),
                        (0..n).map(|i| gd[i] * xa(i)).collect(),
                    ),
                    Binary::Div => {
                        if (0..n).any(|i| zb(i) == 0.0 && gd[i] != 0.0) {
                            return Err(Error::DivByZero);
                        }
                        (
                            (0..n).map(|i| gd[i] / zb(i)).collect(),
                            (0..n).map(|i| -gd[i] * xa(i) / (zb(i) * zb(i))).collect(),
                        )
                    }
                };
                let fit = |t: &Tensor, d: Vec<f64>| {
                    if t.numel() == n && t.shape() == y.shape() {
                        Tensor::from_parts(t.shape().to_vec(), d)
                    } else {
                        Tensor::from_parts(t.shape().to_vec(), vec![d.iter().sum()])
                    }
                };
                vec![(*a, fit(x, da)), (*b, fit(z, db))]
            }
            Op::Affine { x, scale, .. } => vec![(*x, g.scale(*scale))],
            Op::MulConst(a, c) => vec![(*a, g.zip_map(c, |q, k| q * k))],
            Op::MatMul(a, b) => {
                let (x, z) = (val(*a), val(*b));
                let (m, k, n) = (x.shape()[0], x.shape()[1], z.shape()[1]);
                let da = kernels::matmul_bt(g.data(), z.data(), m, n, k);
                let db = kernels::matmul_at(x.data(), g.data(), m, k, n);
                vec![
                    (*a, Tensor::from_parts(vec![m, k], da)),
                    (*b, Tensor::from_parts(vec![k, n], db)),
                ]
            }
            Op::AddRows(a, b) => {
                let n = val(*b).numel();
                let mut db = vec![0.0; n];
                for row in g.data().chunks(n.max(1)) {
                    for (d, q) in db.iter_mut().zip(row) {
                        *d += q;
                    }
                }
                vec![(*a, g.clone()), (*b, Tensor::from_parts(vec![n], db))]
            }
            Op::Reduce { kind, axis, x, argmax } => {
                let xs = val(*x).shape().to_vec();
                let (outer, ext, inner) = split_axis(&xs, *axis);
                let mut d = vec![0.0; outer * ext * inner];
                let gd = g.data();
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let s = if *kind == ReduceKind::Mean { 1.0 / ext as f64 } else { 1.0 };
                        for o in 0..outer {
                            for e in 0..ext {
                                for i in 0..inner {
                                    d[(o * ext + e) * inner + i] = gd[o * inner + i] * s;
                                }
                            }
                        }
                    }
                    ReduceKind::Max => {
                        let am = argmax.as_ref().expect("max records argmax");
                        for o in 0..outer {
                            for i in 0..inner {
                                d[(o * ext + am[o * inner + i]) * inner + i] = gd[o * inner + i];
                            }
                        }
                    }
                }
                vec![(*x, Tensor::from_parts(xs, d))]
            }
            Op::SumAll(a) => vec![(*a, Tensor::full(val(*a).shape().to_vec(), g.item()))],
            Op::MeanAll(a) => {
                let x = val(*a);
                vec![(*a, Tensor::full(x.shape().to_vec(), g.item() / x.numel().max(1) as f64))]
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(y.shape(), *axis);
                let mut offset = 0;
                let mut res = Vec::with_capacity(xs.len());
                for &v in xs {
                    let t = val(v);
                    let ext = t.shape()[*axis];
                    let mut d = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&g.data()[base..base + ext * inner]);
                    }
                    offset += ext;
                    res.push((v, Tensor::from_parts(t.shape().to_vec(), d)));
                }
                res
            }
            Op::Slice { x, axis, start, end } => {
                let xs = val(*x).shape().to_vec();
                let (outer, ext, inner) = split_axis(&xs, *axis);
                let len = end - start;
                let mut d = vec![0.0; outer * ext * inner];
                for o in 0..outer {
                    let dst = o * ext * inner + start * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, Tensor::from_parts(xs, d))]
            }
            Op::Reshape(a) => vec![(*a, g.clone().reshaped(val(*a).shape().to_vec())?)],
            Op::Permute { x, perm } => vec![(*x, permute_tensor(g, &inverse_perm(perm))?)],
            Op::Expand { x, axis, n } => {
                let xv = val(*x);
                let outer: usize = xv.shape()[..*axis].iter().product();
                let inner: usize = xv.shape()[*axis..].iter().product();
                let mut d = vec![0.0; xv.numel()];
                for o in 0..outer {
                    for r in 0..*n {
                        let src = &g.data()[(o * n + r) * inner..(o * n + r + 1) * inner];
                        for (dst, s) in d[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *dst += s;
                        }
                    }
                }
                vec![(*x, Tensor::from_parts(xv.shape().to_vec(), d))]
            }
            Op::Sparse { x, map } => {
                let xs = val(*x).shape().to_vec();
                vec![(*x, Tensor::from_parts(xs, map.transposed().apply(g.data())))]
            }
            Op::Custom { xs, op } => {
                let inputs: Vec<&Tensor> = xs.iter().map(|&v| val(v)).collect();
                let gs = op.backward(&inputs, y, g)?;
                xs.iter().zip(gs).filter_map(|(&v, d)| d.map(|d| (v, d))).collect()
            }
        })
    }

    /// Reverse sweep that records the gradient computation itself on the
    /// tape, so the returned gradients can be differentiated again.
    ///
    /// Returns one entry per `wrt` variable (`None` if the root does not
    /// depend on it). Only ops with a differentiable adjoint are supported
    /// along the path from `wrt` to `root`.
    pub fn grad_graph(&mut self, root: Var, wrt: &[Var]) -> Result<Vec<Option<Var>>> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let end = root.0 + 1;
        let mut reach = vec![false; end];
        for w in wrt {
            if w.0 < end {
                reach[w.0] = true;
            }
        }
        for id in 0..end {
            if !reach[id] && self.nodes[id].op.parents().iter().any(|p| reach[p.0]) {
                reach[id] = true;
            }
        }
        let mut grads: Vec<Option<Var>> = vec![None; end];
        if reach[root.0] {
            let one = self.constant(Tensor::full(rv.shape().to_vec(), 1.0));
            grads[root.0] = Some(one);
        }
        for id in (0..end).rev() {
            if wrt.iter().any(|w| w.0 == id) {
                continue;
            }
            let Some(g) = grads[id] else { continue };
            let op = self.nodes[id].op.clone();
            for (p, pg) in self.vjp_graph(id, &op, g)? {
                if !reach[p.0] {
                    continue;
                }
                grads[p.0] = Some(match grads[p.0] {
                    Some(acc) => self.add(acc, pg)?,
                    None => pg,
                });
            }
        }
        Ok(wrt.iter().map(|w| if w.0 < end { grads[w.0] } else { None }).collect())
    }

    fn vjp_graph(&mut self, id: usize, op: &Op, g: Var) -> Result<Vec<(Var, Var)>> {
        // Reduce a broadcast gradient back onto a single-element operand.
        let fit = |t: &mut Tape, operand: Var, d: Var| -> Result<Var> {
            if t.shape(operand) == t.shape(d) {
                Ok(d)
            } else {
                let s = t.sum_all(d);
                let shape = t.shape(operand).to_vec();
                t.reshape(s, shape)
            }
        };
        Ok(match op {
            Op::Leaf => vec![],
            Op::Unary(kind, a) => {
                let d = match kind {
                    Unary::Neg => self.neg(g),
                    Unary::Square => {
                        let two_x = self.scale(*a, 2.0);
                        self.mul(g, two_x)?
                    }
                    Unary::Relu | Unary::LeakyRelu(_) => {
                        let slope = if let Unary::LeakyRelu(s) = kind { *s } else { 0.0 };
                        let mask = Arc::new(self.value(*a).map(|u| if u > 0.0 { 1.0 } else { slope }));
                        self.mul_const(g, mask)?
                    }
                    Unary::Exp => self.mul(g, Var(id))?,
                    Unary::Sigmoid => {
                        let s = Var(id);
                        let one_minus = self.affine(s, -1.0, 1.0);
                        let ds = self.mul(s, one_minus)?;
                        self.mul(g, ds)?
                    }
                    Unary::Softplus => {
                        let s = self.sigmoid(*a);
                        self.mul(g, s)?
                    }
                    _ => return Err(Error::NotTwiceDifferentiable("unary")),
                };
                vec![(*a, d)]
            }
            Op::Binary(kind, a, b) => match kind {
                Binary::Add => {
                    let (da, db) = (fit(self, *a, g)?, fit(self, *b, g)?);
                    vec![(*a, da), (*b, db)]
                }
                Binary::Sub => {
                    let ng = self.neg(g);
                    let (da, db) = (fit(self, *a, g)?, fit(self, *b, ng)?);
                    vec![(*a, da), (*b, db)]
                }
                Binary::Mul => {
                    let ga = self.mul(g, *b)?;
                    let gb = self.mul(g, *a)?;
                    let (da, db) = (fit(self, *a, ga)?, fit(self, *b, gb)?);
                    vec![(*a, da), (*b, db)]
                }
                Binary::Div => return Err(Error::NotTwiceDifferentiable("div")),
            },
            Op::Affine { x, scale, .. } => vec![(*x, self.scale(g, *scale))],
            Op::MulConst(a, c) => vec![(*a, self.mul_const(g, c.clone())?)],
            Op::MatMul(a, b) => {
                let bt = self.transpose(*b)?;
                let at = self.transpose(*a)?;
                let da = self.matmul(g, bt)?;
                let db = self.matmul(at, g)?;
                vec![(*a, da), (*b, db)]
            }
            Op::AddRows(a, b) => {
                let db = self.reduce(ReduceKind::Sum, g, 0)?;
                vec![(*a, g), (*b, db)]
            }
            Op::Reduce { kind, axis, x, .. } => {
                let ext = self.shape(*x)[*axis];
                let d = match kind {
                    ReduceKind::Sum => self.expand(g, *axis, ext)?,
                    ReduceKind::Mean => {
                        let e = self.expand(g, *axis, ext)?;
                        self.scale(e, 1.0 / ext as f64)
                    }
                    ReduceKind::Max => return Err(Error::NotTwiceDifferentiable("reduce max")),
                };
                vec![(*x, d)]
            }
            Op::SumAll(a) | Op::MeanAll(a) => {
                let x = self.value(*a);
                let n = x.numel().max(1) as f64;
                let w = if matches!(op, Op::MeanAll(_)) { 1.0 / n } else { 1.0 };
                let c = self.constant(Tensor::full(x.shape().to_vec(), w));
                vec![(*a, self.mul(c, g)?)]
            }
            Op::Concat { xs, axis } => {
                let mut res = Vec::with_capacity(xs.len());
                let mut offset = 0;
                for &v in xs {
                    let ext = self.shape(v)[*axis];
                    res.push((v, self.slice(g, *axis, offset, offset + ext)?));
                    offset += ext;
                }
                res
            }
            Op::Slice { x, axis, start, end } => {
                let xs = self.shape(*x).to_vec();
                let gs = self.shape(g).to_vec();
                let (outer, ext, inner) = split_axis(&xs, *axis);
                let len = end - start;
                let mut index = vec![None; outer * ext * inner];
                for o in 0..outer {
                    for e in 0..len {
                        for i in 0..inner {
                            index[(o * ext + start + e) * inner + i] = Some((o * len + e) * inner + i);
                        }
                    }
                }
                let map = Arc::new(SparseMap::gather(&index, gs.iter().product()));
                vec![(*x, self.sparse(g, map, xs)?)]
            }
            Op::Reshape(a) => {
                let s = self.shape(*a).to_vec();
                vec![(*a, self.reshape(g, s)?)]
            }
            Op::Permute { x, perm } => vec![(*x, self.permute(g, &inverse_perm(perm))?)],
            Op::Expand { x, axis, .. } => vec![(*x, self.reduce(ReduceKind::Sum, g, *axis)?)],
            Op::Sparse { x, map } => {
                let s = self.shape(*x).to_vec();
                vec![(*x, self.sparse(g, map.transposed(), s)?)]
            }
            Op::Custom { op, .. } => return Err(Error::NotTwiceDifferentiable(op.name())),
        })
    }

    /// Name of the op that produced `v`; useful in diagnostics.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(crate) fn permute_tensor(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let rank = x.ndim();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::invalid(format!("invalid permutation {perm:?} for rank {rank}")));
    }
    let in_strides = strides(x.shape());
    let shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(x.data()[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(Tensor::from_parts(shape, out))
}
