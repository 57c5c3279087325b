use std::str::FromStr;

use super::array::{broadcast_offsets, broadcast_shape, gemm, reduce_to, Array};
use crate::error::{Error, Result};

/// Guard added inside `log` and `sqrt` arguments.
pub const LOG_EPS: f64 = 1e-12;
/// Floor applied to row norms.
pub const NORM_EPS: f64 = 1e-8;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Local gradient rule attached to a non-leaf node.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// Elementwise, with NumPy broadcasting.
    Add,
    Subtract,
    Multiply,
    Divide,
    ScalarMultiply(f64),
    /// `[m, k] x [k, n]`.
    MatMul,
    /// 2-D transpose.
    Transpose,
    Reshape(Vec<usize>),
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    Tanh,
    Relu,
    Exp,
    /// `ln(x + 1e-12)`
    Log,
    /// `sqrt(x + 1e-12)`
    Sqrt,
    Sum,
    Mean,
    /// L2 norm over the last axis (kept as extent 1), floored at `NORM_EPS`.
    RowNorm,
    /// Max-shifted softmax over the last axis.
    Softmax,
    /// Same-size 2-D convolution over the last two axes with a fixed odd
    /// kernel and zero padding.
    Conv2d(Array),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Subtract => "sub",
            OpKind::Multiply => "mul",
            OpKind::Divide => "div",
            OpKind::ScalarMultiply(_) => "scale",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Reshape(_) => "reshape",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sqrt => "sqrt",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::RowNorm => "row_norm",
            OpKind::Softmax => "softmax",
            OpKind::Conv2d(_) => "conv2d",
        }
    }

    /// Required input count; `None` means one or more.
    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::Add | OpKind::Subtract | OpKind::Multiply | OpKind::Divide | OpKind::MatMul => {
                Some(2)
            }
            OpKind::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

impl FromStr for OpKind {
    type Err = Error;

    /// Parses the parameter-free operator names.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => OpKind::Add,
            "sub" | "subtract" => OpKind::Subtract,
            "mul" | "multiply" => OpKind::Multiply,
            "div" | "divide" => OpKind::Divide,
            "matmul" => OpKind::MatMul,
            "transpose" => OpKind::Transpose,
            "tanh" => OpKind::Tanh,
            "relu" => OpKind::Relu,
            "exp" => OpKind::Exp,
            "log" => OpKind::Log,
            "sqrt" => OpKind::Sqrt,
            "sum" => OpKind::Sum,
            "mean" => OpKind::Mean,
            "row_norm" => OpKind::RowNorm,
            "softmax" => OpKind::Softmax,
            other => return Err(Error::UnsupportedOp(other.to_string())),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub value: Array,
    /// `None` for leaves.
    pub kind: Option<OpKind>,
    pub parents: Vec<Var>,
    pub requires_grad: bool,
    pub grad: Option<Array>,
}

/// Append-only computation graph. Parents always precede children, so the
/// insertion order is a topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Array) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.leaf(value, false)
    }

    /// Copies `v`'s value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn leaf(&mut self, value: Array, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            kind: None,
            parents: Vec::new(),
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Array> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of `v`, or zeros if nothing flowed into it.
    pub fn grad_or_zeros(&self, v: Var) -> Array {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Array::zeros(self.shape(v)))
    }

    /// Applies `kind` to `inputs`, recording the edge.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        if let Some(n) = kind.arity() {
            if inputs.len() != n {
                return Err(Error::Arity {
                    op: kind.name(),
                    expected: n,
                    got: inputs.len(),
                });
            }
        } else if inputs.is_empty() {
            return Err(Error::Arity {
                op: kind.name(),
                expected: 1,
                got: 0,
            });
        }
        let values: Vec<&Array> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = forward(&kind, &values)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            kind: Some(kind),
            parents: inputs.to_vec(),
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Subtract, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Multiply, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Divide, &[a, b])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::ScalarMultiply(c), &[a])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Transpose, &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(OpKind::Reshape(shape.to_vec()), &[a])
    }
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        self.apply(OpKind::Concat { axis }, inputs)
    }
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(OpKind::Slice { axis, start, end }, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Tanh, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Log, &[a])
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sqrt, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Mean, &[a])
    }
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::RowNorm, &[a])
    }
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Softmax, &[a])
    }
    pub fn conv2d(&mut self, a: Var, kernel: Array) -> Result<Var> {
        self.apply(OpKind::Conv2d(kernel), &[a])
    }

    /// Reverse sweep from a scalar `root`. Previous gradients are cleared;
    /// uses of a node along several paths accumulate additively.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::NonScalarRoot(
                self.nodes[root.0].value.shape().to_vec(),
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let root_shape = self.nodes[root.0].value.shape().to_vec();
        self.nodes[root.0].grad = Some(Array::full(&root_shape, 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(kind) = node.kind.as_ref() else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = node.grad.as_ref() else {
                continue;
            };
            let inputs: Vec<&Array> = node
                .parents
                .iter()
                .map(|p| &self.nodes[p.0].value)
                .collect();
            let wanted: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let contributions = backward_rule(kind, &inputs, &node.value, g, &wanted);
            let parents = node.parents.clone();
            for (p, c) in parents.into_iter().zip(contributions) {
                let Some(c) = c else { continue };
                match &mut self.nodes[p.0].grad {
                    Some(acc) => acc.add_assign(&c),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(())
    }
}

fn mismatch(op: &'static str, a: &Array, b: &Array) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn binary(op: &'static str, a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Result<Array> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Array::new(a.shape().to_vec(), data);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| mismatch(op, a, b))?;
    let oa = broadcast_offsets(a.shape(), &out_shape);
    let ob = broadcast_offsets(b.shape(), &out_shape);
    let (da, db) = (a.data(), b.data());
    let data = oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect();
    Array::new(out_shape, data)
}

/// Materializes `a` broadcast to `shape`.
fn expand(a: &Array, shape: &[usize]) -> Vec<f64> {
    if a.shape() == shape {
        return a.data().to_vec();
    }
    let d = a.data();
    broadcast_offsets(a.shape(), shape)
        .into_iter()
        .map(|i| d[i])
        .collect()
}

fn unary(a: &Array, f: impl Fn(f64) -> f64) -> Array {
    a.map(f)
}

/// `(outer, extent, inner)` split of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn forward(kind: &OpKind, x: &[&Array]) -> Result<Array> {
    match kind {
        OpKind::Add => binary("add", x[0], x[1], |a, b| a + b),
        OpKind::Subtract => binary("sub", x[0], x[1], |a, b| a - b),
        OpKind::Multiply => binary("mul", x[0], x[1], |a, b| a * b),
        OpKind::Divide => binary("div", x[0], x[1], |a, b| a / b),
        OpKind::ScalarMultiply(c) => Ok(unary(x[0], |a| a * c)),
        OpKind::MatMul => {
            let (a, b) = (x[0], x[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(mismatch("matmul", a, b));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
            Array::new(vec![m, n], out)
        }
        OpKind::Transpose => {
            let a = x[0];
            if a.rank() != 2 {
                return Err(Error::InvalidShape {
                    shape: a.shape().to_vec(),
                    reason: "transpose expects a matrix".into(),
                });
            }
            Ok(transpose2(a))
        }
        OpKind::Reshape(shape) => x[0].clone().reshaped(shape),
        OpKind::Concat { axis } => concat(x, *axis),
        OpKind::Slice { axis, start, end } => {
            let a = x[0];
            if *axis >= a.rank() || start >= end || *end > a.shape()[*axis] {
                return Err(Error::InvalidShape {
                    shape: a.shape().to_vec(),
                    reason: format!("slice [{start}, {end}) on axis {axis} out of range"),
                });
            }
            let (outer, extent, inner) = split_axis(a.shape(), *axis);
            let width = end - start;
            let mut data = Vec::with_capacity(outer * width * inner);
            for o in 0..outer {
                let base = o * extent * inner;
                data.extend_from_slice(&a.data()[base + start * inner..base + end * inner]);
            }
            let mut shape = a.shape().to_vec();
            shape[*axis] = width;
            Array::new(shape, data)
        }
        OpKind::Tanh => Ok(unary(x[0], f64::tanh)),
        OpKind::Relu => Ok(unary(x[0], |a| a.max(0.0))),
        OpKind::Exp => Ok(unary(x[0], f64::exp)),
        OpKind::Log => {
            check_domain("log", x[0])?;
            Ok(unary(x[0], |a| (a + LOG_EPS).ln()))
        }
        OpKind::Sqrt => {
            check_domain("sqrt", x[0])?;
            Ok(unary(x[0], |a| (a + LOG_EPS).sqrt()))
        }
        OpKind::Sum => Ok(Array::scalar(x[0].sum())),
        OpKind::Mean => Ok(Array::scalar(x[0].sum() / x[0].len() as f64)),
        OpKind::RowNorm => {
            let a = x[0];
            let w = a.last_dim();
            let data = a
                .data()
                .chunks(w)
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS))
                .collect();
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = 1;
            Array::new(shape, data)
        }
        OpKind::Softmax => Ok(softmax(x[0])),
        OpKind::Conv2d(kernel) => {
            check_kernel(kernel)?;
            if x[0].rank() < 2 {
                return Err(Error::InvalidShape {
                    shape: x[0].shape().to_vec(),
                    reason: "conv2d expects rank >= 2".into(),
                });
            }
            Ok(conv2d(x[0], kernel, false))
        }
    }
}

fn check_domain(op: &'static str, a: &Array) -> Result<()> {
    match a.data().iter().find(|&&v| v + LOG_EPS < 0.0 || v.is_nan()) {
        Some(&v) => Err(Error::Domain { op, value: v }),
        None => Ok(()),
    }
}

fn check_kernel(k: &Array) -> Result<()> {
    if k.rank() != 2 || k.shape()[0].is_multiple_of(2) || k.shape()[1].is_multiple_of(2) {
        return Err(Error::InvalidShape {
            shape: k.shape().to_vec(),
            reason: "conv2d kernel must be a matrix with odd extents".into(),
        });
    }
    Ok(())
}

fn transpose2(a: &Array) -> Array {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Array::new(vec![n, m], out).expect("transpose preserves size")
}

fn concat(x: &[&Array], axis: usize) -> Result<Array> {
    let first = x[0];
    if axis >= first.rank() {
        return Err(Error::InvalidShape {
            shape: first.shape().to_vec(),
            reason: format!("concat axis {axis} out of range"),
        });
    }
    for a in &x[1..] {
        let compatible = a.rank() == first.rank()
            && a.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (p, q))| i == axis || p == q);
        if !compatible {
            return Err(mismatch("concat", first, a));
        }
    }
    let (outer, _, inner) = split_axis(first.shape(), axis);
    let total: usize = x.iter().map(|a| a.shape()[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for a in x {
            let chunk = a.shape()[axis] * inner;
            data.extend_from_slice(&a.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Array::new(shape, data)
}

pub(crate) fn softmax(a: &Array) -> Array {
    let w = a.last_dim();
    let mut out = a.data().to_vec();
    for row in out.chunks_mut(w) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Array::new(a.shape().to_vec(), out).expect("softmax preserves shape")
}

/// Zero-padded same-size convolution over the trailing two axes. With
/// `adjoint`, applies the transposed operator (used by the backward pass).
fn conv2d(a: &Array, kernel: &Array, adjoint: bool) -> Array {
    let r = a.rank();
    let (rows, cols) = (a.shape()[r - 2], a.shape()[r - 1]);
    let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
    let (ch, cw) = ((kh / 2) as isize, (kw / 2) as isize);
    let plane = rows * cols;
    let mut out = vec![0.0; a.len()];
    for (src, dst) in a.data().chunks(plane).zip(out.chunks_mut(plane)) {
        for i in 0..rows as isize {
            for j in 0..cols as isize {
                let mut acc = 0.0;
                for u in 0..kh as isize {
                    for v in 0..kw as isize {
                        // forward: out[i,j] = sum K[u,v] x[i-(u-ch), j-(v-cw)]
                        // adjoint: out[i,j] = sum K[u,v] g[i+(u-ch), j+(v-cw)]
                        let (si, sj) = if adjoint {
                            (i + (u - ch), j + (v - cw))
                        } else {
                            (i - (u - ch), j - (v - cw))
                        };
                        if si < 0 || sj < 0 || si >= rows as isize || sj >= cols as isize {
                            continue;
                        }
                        acc += kernel.data()[(u as usize) * kw + v as usize]
                            * src[si as usize * cols + sj as usize];
                    }
                }
                dst[i as usize * cols + j as usize] = acc;
            }
        }
    }
    Array::new(a.shape().to_vec(), out).expect("conv2d preserves shape")
}

/// Gradients with respect to each input, `None` where not wanted.
fn backward_rule(
    kind: &OpKind,
    x: &[&Array],
    out: &Array,
    g: &Array,
    wanted: &[bool],
) -> Vec<Option<Array>> {
    let only = |a: Array| vec![Some(a)];
    let elementwise = |f: &dyn Fn(usize) -> f64| -> Array {
        let data = (0..g.len()).map(f).collect();
        Array::new(g.shape().to_vec(), data).expect("gradient shape")
    };
    match kind {
        OpKind::Add | OpKind::Subtract => {
            let sign = if matches!(kind, OpKind::Add) {
                1.0
            } else {
                -1.0
            };
            let ga = wanted[0].then(|| reduce_to(g.data(), out.shape(), x[0].shape()));
            let gb = wanted[1].then(|| {
                let neg: Vec<f64> = g.data().iter().map(|v| v * sign).collect();
                reduce_to(&neg, out.shape(), x[1].shape())
            });
            vec![ga, gb]
        }
        OpKind::Multiply => {
            let ga = wanted[0].then(|| {
                let b = expand(x[1], out.shape());
                let prod: Vec<f64> = g.data().iter().zip(&b).map(|(g, b)| g * b).collect();
                reduce_to(&prod, out.shape(), x[0].shape())
            });
            let gb = wanted[1].then(|| {
                let a = expand(x[0], out.shape());
                let prod: Vec<f64> = g.data().iter().zip(&a).map(|(g, a)| g * a).collect();
                reduce_to(&prod, out.shape(), x[1].shape())
            });
            vec![ga, gb]
        }
        OpKind::Divide => {
            let b = expand(x[1], out.shape());
            let ga = wanted[0].then(|| {
                let q: Vec<f64> = g.data().iter().zip(&b).map(|(g, b)| g / b).collect();
                reduce_to(&q, out.shape(), x[0].shape())
            });
            let gb = wanted[1].then(|| {
                // d(a/b)/db = -(a/b)/b
                let q: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(&b)
                    .map(|((g, y), b)| -g * y / b)
                    .collect();
                reduce_to(&q, out.shape(), x[1].shape())
            });
            vec![ga, gb]
        }
        OpKind::ScalarMultiply(c) => only(g.map(|v| v * c)),
        OpKind::MatMul => {
            let (a, b) = (x[0], x[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let ga = wanted[0].then(|| {
                let mut d = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, b.data(), true, &mut d, false);
                Array::new(vec![m, k], d).unwrap()
            });
            let gb = wanted[1].then(|| {
                let mut d = vec![0.0; k * n];
                gemm(k, m, n, a.data(), true, g.data(), false, &mut d, false);
                Array::new(vec![k, n], d).unwrap()
            });
            vec![ga, gb]
        }
        OpKind::Transpose => only(transpose2(g)),
        OpKind::Reshape(_) => only(g.clone().reshaped(x[0].shape()).unwrap()),
        OpKind::Concat { axis } => {
            let (outer, _, inner) = split_axis(out.shape(), *axis);
            let total = out.shape()[*axis];
            let mut offset = 0;
            x.iter()
                .zip(wanted)
                .map(|(a, &w)| {
                    let width = a.shape()[*axis];
                    let start = offset;
                    offset += width;
                    w.then(|| {
                        let mut data = Vec::with_capacity(a.len());
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            data.extend_from_slice(&g.data()[base..base + width * inner]);
                        }
                        Array::new(a.shape().to_vec(), data).unwrap()
                    })
                })
                .collect()
        }
        OpKind::Slice { axis, start, end } => {
            let a = x[0];
            let (outer, extent, inner) = split_axis(a.shape(), *axis);
            let width = end - start;
            let mut d = Array::zeros(a.shape());
            for o in 0..outer {
                let dst = o * extent * inner + start * inner;
                let src = o * width * inner;
                d.data_mut()[dst..dst + width * inner]
                    .copy_from_slice(&g.data()[src..src + width * inner]);
            }
            only(d)
        }
        OpKind::Tanh => only(elementwise(&|i| {
            let y = out.data()[i];
            g.data()[i] * (1.0 - y * y)
        })),
        OpKind::Relu => only(elementwise(&|i| {
            if x[0].data()[i] > 0.0 {
                g.data()[i]
            } else {
                0.0
            }
        })),
        OpKind::Exp => only(elementwise(&|i| g.data()[i] * out.data()[i])),
        OpKind::Log => only(elementwise(&|i| g.data()[i] / (x[0].data()[i] + LOG_EPS))),
        OpKind::Sqrt => only(elementwise(&|i| g.data()[i] * 0.5 / out.data()[i])),
        OpKind::Sum => only(Array::full(x[0].shape(), g.item())),
        OpKind::Mean => only(Array::full(x[0].shape(), g.item() / x[0].len() as f64)),
        OpKind::RowNorm => {
            let a = x[0];
            let w = a.last_dim();
            let mut d = Array::zeros(a.shape());
            for (r, (row, drow)) in a
                .data()
                .chunks(w)
                .zip(d.data_mut().chunks_mut(w))
                .enumerate()
            {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > NORM_EPS {
                    let scale = g.data()[r] / norm;
                    for (dv, v) in drow.iter_mut().zip(row) {
                        *dv = scale * v;
                    }
                }
            }
            only(d)
        }
        OpKind::Softmax => {
            let w = out.last_dim();
            let mut d = Array::zeros(out.shape());
            for ((y, gy), dx) in out
                .data()
                .chunks(w)
                .zip(g.data().chunks(w))
                .zip(d.data_mut().chunks_mut(w))
            {
                let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                for ((dx, y), gy) in dx.iter_mut().zip(y).zip(gy) {
                    *dx = y * (gy - dot);
                }
            }
            only(d)
        }
        OpKind::Conv2d(kernel) => only(conv2d(g, kernel, true)),
    }
}
