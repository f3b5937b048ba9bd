//! Tape-based reverse-mode differentiation over dense `f64` arrays.
//!
//! Every operation is recorded eagerly on a [`Tape`] and returns a [`Var`]
//! handle. A single call to [`Tape::backward`] on a scalar root walks the
//! tape in reverse creation order and accumulates adjoints for every node
//! that depends on a `requires_grad` leaf.
//!
//! Kinks use a fixed subgradient of zero: `relu'(0) = 0`, `abs'(0) = 0`,
//! `clamp_min` at the bound is inactive, and `sqrt'(0)` is taken as zero so
//! that Euclidean norms of zero vectors stay finite. `max_over_axis` routes
//! the adjoint to the first maximal element.
//!
//! Elementwise binary ops accept equal shapes or a single-element operand
//! on either side (scalar broadcasting). Nothing broader is supported.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("gradient check: non-finite function value at component {0}")]
    NonFinite(usize),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major array.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(AutodiffError::InvalidArgument {
                op: "tensor",
                reason: format!("shape {shape:?} must be non-empty with positive extents"),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(AutodiffError::InvalidArgument {
                op: "tensor",
                reason: format!("shape {shape:?} holds {n} values but data has {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len().max(1);
        let data = if data.is_empty() { vec![0.0] } else { data };
        Self {
            shape: vec![n],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds with their non-tensor parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    ElementwiseMul,
    ScalarMul(f64),
    AddScalar(f64),
    MatMul,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Reshape(Vec<usize>),
    Sum,
    Mean,
    Sin,
    Cos,
    Tanh,
    Sqrt,
    Square,
    Relu,
    ClampMin(f64),
    Abs,
    MaxOverAxis { axis: usize },
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::ElementwiseMul => "elementwise_mul",
            OpKind::ScalarMul(_) => "scalar_mul",
            OpKind::AddScalar(_) => "add_scalar",
            OpKind::MatMul => "matmul",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Reshape(_) => "reshape",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Sin => "sin",
            OpKind::Cos => "cos",
            OpKind::Tanh => "tanh",
            OpKind::Sqrt => "sqrt",
            OpKind::Square => "square",
            OpKind::Relu => "relu",
            OpKind::ClampMin(_) => "clamp_min",
            OpKind::Abs => "abs",
            OpKind::MaxOverAxis { .. } => "max_over_axis",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::Add | OpKind::Sub | OpKind::ElementwiseMul | OpKind::MatMul => Some(2),
            OpKind::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    kind: Option<OpKind>,
    inputs: Vec<Var>,
    /// Argmax indices for `max_over_axis`.
    aux: Vec<usize>,
    requires_grad: bool,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn elementwise_shapes(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape == b.shape {
        Ok(a.shape.clone())
    } else if b.len() == 1 {
        Ok(a.shape.clone())
    } else if a.len() == 1 {
        Ok(b.shape.clone())
    } else {
        Err(AutodiffError::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        })
    }
}

fn zip_map(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = if a.len() == b.len() {
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
    } else if b.len() == 1 {
        let y = b.data[0];
        a.data.iter().map(|&x| f(x, y)).collect()
    } else {
        let x = a.data[0];
        b.data.iter().map(|&y| f(x, y)).collect()
    };
    Tensor { shape, data }
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|&x| f(x)).collect(),
    }
}

/// `out[m,n] += a[m,k] * b[k,n]`
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] * b[k,n]^T`
fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            out[i * k + p] += acc;
        }
    }
}

/// `out[k,n] += a[m,k]^T * g[m,n]`
fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
}

/// Splits a shape around `axis` into (outer, axis extent, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    fn push(&mut self, value: Tensor, kind: Option<OpKind>, inputs: Vec<Var>, aux: Vec<usize>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            kind,
            inputs,
            aux,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            kind: None,
            inputs: Vec::new(),
            aux: Vec::new(),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            kind: None,
            inputs: Vec::new(),
            aux: Vec::new(),
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records `kind` applied to `inputs` and returns the output node.
    pub fn record(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let op = kind.name();
        if let Some(n) = kind.arity() {
            if inputs.len() != n {
                return Err(AutodiffError::InvalidArgument {
                    op,
                    reason: format!("expected {n} inputs, got {}", inputs.len()),
                });
            }
        } else if inputs.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op,
                reason: "needs at least one input".into(),
            });
        }
        let mut aux = Vec::new();
        let value = {
            let x = &self.nodes[inputs[0].0].value;
            match &kind {
                OpKind::Add | OpKind::Sub | OpKind::ElementwiseMul => {
                    let y = &self.nodes[inputs[1].0].value;
                    let shape = elementwise_shapes(op, x, y)?;
                    match kind {
                        OpKind::Add => zip_map(x, y, shape, |a, b| a + b),
                        OpKind::Sub => zip_map(x, y, shape, |a, b| a - b),
                        _ => zip_map(x, y, shape, |a, b| a * b),
                    }
                }
                OpKind::ScalarMul(c) => map(x, |a| c * a),
                OpKind::AddScalar(c) => map(x, |a| a + c),
                OpKind::MatMul => {
                    let y = &self.nodes[inputs[1].0].value;
                    if x.shape.len() != 2 || y.shape.len() != 2 || x.shape[1] != y.shape[0] {
                        return Err(AutodiffError::ShapeMismatch {
                            op,
                            lhs: x.shape.clone(),
                            rhs: y.shape.clone(),
                        });
                    }
                    let (m, k, n) = (x.shape[0], x.shape[1], y.shape[1]);
                    let mut out = vec![0.0; m * n];
                    gemm_nn(&x.data, &y.data, &mut out, m, k, n);
                    Tensor {
                        shape: vec![m, n],
                        data: out,
                    }
                }
                OpKind::Concat { axis } => {
                    let axis = *axis;
                    let first = &x.shape;
                    if axis >= first.len() {
                        return Err(AutodiffError::InvalidArgument {
                            op,
                            reason: format!("axis {axis} out of range for shape {first:?}"),
                        });
                    }
                    let mut total = 0;
                    for v in inputs {
                        let s = &self.nodes[v.0].value.shape;
                        let compatible = s.len() == first.len()
                            && s.iter().zip(first).enumerate().all(|(i, (a, b))| i == axis || a == b);
                        if !compatible {
                            return Err(AutodiffError::ShapeMismatch {
                                op,
                                lhs: first.clone(),
                                rhs: s.clone(),
                            });
                        }
                        total += s[axis];
                    }
                    let mut shape = first.clone();
                    shape[axis] = total;
                    let (outer, _, inner) = axis_split(&shape, axis);
                    let mut data = Vec::with_capacity(outer * total * inner);
                    for o in 0..outer {
                        for v in inputs {
                            let t = &self.nodes[v.0].value;
                            let block = t.shape[axis] * inner;
                            data.extend_from_slice(&t.data[o * block..(o + 1) * block]);
                        }
                    }
                    Tensor { shape, data }
                }
                OpKind::Slice { axis, start, len } => {
                    let (axis, start, len) = (*axis, *start, *len);
                    if axis >= x.shape.len() || len == 0 || start + len > x.shape[axis] {
                        return Err(AutodiffError::InvalidArgument {
                            op,
                            reason: format!(
                                "range {start}..{} on axis {axis} invalid for shape {:?}",
                                start + len,
                                x.shape
                            ),
                        });
                    }
                    let (outer, extent, inner) = axis_split(&x.shape, axis);
                    let mut data = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = o * extent * inner;
                        data.extend_from_slice(&x.data[base + start * inner..base + (start + len) * inner]);
                    }
                    let mut shape = x.shape.clone();
                    shape[axis] = len;
                    Tensor { shape, data }
                }
                OpKind::Reshape(shape) => {
                    let n: usize = shape.iter().product();
                    if n != x.len() || shape.iter().any(|&d| d == 0) {
                        return Err(AutodiffError::ShapeMismatch {
                            op,
                            lhs: x.shape.clone(),
                            rhs: shape.clone(),
                        });
                    }
                    Tensor {
                        shape: shape.clone(),
                        data: x.data.clone(),
                    }
                }
                OpKind::Sum => Tensor::scalar(x.data.iter().sum()),
                OpKind::Mean => Tensor::scalar(x.data.iter().sum::<f64>() / x.len() as f64),
                OpKind::Sin => map(x, f64::sin),
                OpKind::Cos => map(x, f64::cos),
                OpKind::Tanh => map(x, f64::tanh),
                OpKind::Sqrt => {
                    if let Some(bad) = x.data.iter().find(|v| **v < 0.0) {
                        return Err(AutodiffError::InvalidArgument {
                            op,
                            reason: format!("negative input {bad}"),
                        });
                    }
                    map(x, f64::sqrt)
                }
                OpKind::Square => map(x, |a| a * a),
                OpKind::Relu => map(x, |a| if a > 0.0 { a } else { 0.0 }),
                OpKind::ClampMin(lo) => map(x, |a| if a > *lo { a } else { *lo }),
                OpKind::Abs => map(x, f64::abs),
                OpKind::MaxOverAxis { axis } => {
                    let axis = *axis;
                    if axis >= x.shape.len() {
                        return Err(AutodiffError::InvalidArgument {
                            op,
                            reason: format!("axis {axis} out of range for shape {:?}", x.shape),
                        });
                    }
                    let (outer, extent, inner) = axis_split(&x.shape, axis);
                    let mut data = Vec::with_capacity(outer * inner);
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut best = 0;
                            let mut best_val = x.data[o * extent * inner + i];
                            for e in 1..extent {
                                let v = x.data[(o * extent + e) * inner + i];
                                if v > best_val {
                                    best = e;
                                    best_val = v;
                                }
                            }
                            aux.push(best);
                            data.push(best_val);
                        }
                    }
                    let mut shape = x.shape.clone();
                    shape[axis] = 1;
                    Tensor { shape, data }
                }
            }
        };
        Ok(self.push(value, Some(kind), inputs.to_vec(), aux))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::ElementwiseMul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.record(OpKind::ScalarMul(c), &[a]).expect("unary op")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.record(OpKind::AddScalar(c), &[a]).expect("unary op")
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::MatMul, &[a, b])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        self.record(OpKind::Concat { axis }, inputs)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.record(OpKind::Slice { axis, start, len }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.record(OpKind::Reshape(shape.to_vec()), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.record(OpKind::Sum, &[a]).expect("unary op")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.record(OpKind::Mean, &[a]).expect("unary op")
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.record(OpKind::Sin, &[a]).expect("unary op")
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.record(OpKind::Cos, &[a]).expect("unary op")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.record(OpKind::Tanh, &[a]).expect("unary op")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Sqrt, &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.record(OpKind::Square, &[a]).expect("unary op")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.record(OpKind::Relu, &[a]).expect("unary op")
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        self.record(OpKind::ClampMin(lo), &[a]).expect("unary op")
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.record(OpKind::Abs, &[a]).expect("unary op")
    }

    pub fn max_over_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.record(OpKind::MaxOverAxis { axis }, &[a])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(AutodiffError::EmptyTape);
        }
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(root.value.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(&root.value.shape, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(kind) = &node.kind else { continue };
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, kind, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: Var, contribution: Tensor) {
        let node = &self.nodes[target.0];
        if !node.requires_grad {
            return;
        }
        let shape = &node.value.shape;
        // Reduce a broadcast contribution back onto a single-element operand.
        let contribution = if node.value.len() == 1 && contribution.len() != 1 {
            Tensor {
                shape: shape.clone(),
                data: vec![contribution.data.iter().sum()],
            }
        } else {
            contribution
        };
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, c) in existing.data.iter_mut().zip(&contribution.data) {
                    *e += c;
                }
            }
            slot @ None => {
                *slot = Some(Tensor {
                    shape: shape.clone(),
                    data: contribution.data,
                });
            }
        }
    }

    /// Elementwise product of `g` with a per-element derivative of the input.
    fn chain_unary(&self, g: &Tensor, x: &Tensor, d: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            shape: g.shape.clone(),
            data: g.data.iter().zip(&x.data).map(|(&gv, &xv)| d(gv, xv)).collect(),
        }
    }

    fn broadcast_operand(&self, t: &Tensor, len: usize) -> Vec<f64> {
        if t.len() == len {
            t.data.clone()
        } else {
            vec![t.data[0]; len]
        }
    }

    fn propagate(&self, node: &Node, kind: &OpKind, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let inputs = &node.inputs;
        let x = &self.nodes[inputs[0].0].value;
        match kind {
            OpKind::Add => {
                self.accumulate(grads, inputs[0], g.clone());
                self.accumulate(grads, inputs[1], g.clone());
            }
            OpKind::Sub => {
                self.accumulate(grads, inputs[0], g.clone());
                self.accumulate(grads, inputs[1], map(g, |v| -v));
            }
            OpKind::ElementwiseMul => {
                let y = &self.nodes[inputs[1].0].value;
                let n = g.len();
                if self.nodes[inputs[0].0].requires_grad {
                    let yb = self.broadcast_operand(y, n);
                    let data = g.data.iter().zip(&yb).map(|(a, b)| a * b).collect();
                    self.accumulate(grads, inputs[0], Tensor { shape: g.shape.clone(), data });
                }
                if self.nodes[inputs[1].0].requires_grad {
                    let xb = self.broadcast_operand(x, n);
                    let data = g.data.iter().zip(&xb).map(|(a, b)| a * b).collect();
                    self.accumulate(grads, inputs[1], Tensor { shape: g.shape.clone(), data });
                }
            }
            OpKind::ScalarMul(c) => self.accumulate(grads, inputs[0], map(g, |v| c * v)),
            OpKind::AddScalar(_) | OpKind::Reshape(_) => self.accumulate(
                grads,
                inputs[0],
                Tensor {
                    shape: x.shape.clone(),
                    data: g.data.clone(),
                },
            ),
            OpKind::MatMul => {
                let y = &self.nodes[inputs[1].0].value;
                let (m, k, n) = (x.shape[0], x.shape[1], y.shape[1]);
                if self.nodes[inputs[0].0].requires_grad {
                    let mut dx = vec![0.0; m * k];
                    gemm_nt(&g.data, &y.data, &mut dx, m, k, n);
                    self.accumulate(grads, inputs[0], Tensor { shape: vec![m, k], data: dx });
                }
                if self.nodes[inputs[1].0].requires_grad {
                    let mut dy = vec![0.0; k * n];
                    gemm_tn(&x.data, &g.data, &mut dy, m, k, n);
                    self.accumulate(grads, inputs[1], Tensor { shape: vec![k, n], data: dy });
                }
            }
            OpKind::Concat { axis } => {
                let (outer, total, inner) = axis_split(&g.shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let t = &self.nodes[v.0].value;
                    let extent = t.shape[*axis];
                    if self.nodes[v.0].requires_grad {
                        let mut data = Vec::with_capacity(t.len());
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            data.extend_from_slice(&g.data[base..base + extent * inner]);
                        }
                        self.accumulate(grads, v, Tensor { shape: t.shape.clone(), data });
                    }
                    offset += extent;
                }
            }
            OpKind::Slice { axis, start, len } => {
                let (outer, extent, inner) = axis_split(&x.shape, *axis);
                let mut data = vec![0.0; x.len()];
                for o in 0..outer {
                    let dst = (o * extent + start) * inner;
                    let src = o * len * inner;
                    data[dst..dst + len * inner].copy_from_slice(&g.data[src..src + len * inner]);
                }
                self.accumulate(grads, inputs[0], Tensor { shape: x.shape.clone(), data });
            }
            OpKind::Sum => {
                self.accumulate(grads, inputs[0], Tensor::filled(&x.shape, g.data[0]));
            }
            OpKind::Mean => {
                let v = g.data[0] / x.len() as f64;
                self.accumulate(grads, inputs[0], Tensor::filled(&x.shape, v));
            }
            OpKind::Sin => {
                let d = self.chain_unary(g, x, |gv, xv| gv * xv.cos());
                self.accumulate(grads, inputs[0], d);
            }
            OpKind::Cos => {
                let d = self.chain_unary(g, x, |gv, xv| -gv * xv.sin());
                self.accumulate(grads, inputs[0], d);
            }
            OpKind::Tanh => {
                let d = self.chain_unary(g, &node.value, |gv, yv| gv * (1.0 - yv * yv));
                self.accumulate(grads, inputs[0], d);
            }
            OpKind::Sqrt => {
                let d = self.chain_unary(g, &node.value, |gv, yv| if yv > 0.0 { gv * 0.5 / yv } else { 0.0 });
                self.accumulate(grads, inputs[0], d);
            }
            OpKind::Square => {
                let d = self.chain_unary(g, x, |gv, xv| 2.0 * xv * gv);
                self.accumulate(grads, inputs[0], d);
            }
            OpKind::Relu => {
                let d = self.chain_unary(g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, inputs[0], d);
            }
            OpKind::ClampMin(lo) => {
                let d = self.chain_unary(g, x, |gv, xv| if xv > *lo { gv } else { 0.0 });
                self.accumulate(grads, inputs[0], d);
            }
            OpKind::Abs => {
                let d = self.chain_unary(g, x, |gv, xv| {
                    if xv > 0.0 {
                        gv
                    } else if xv < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, inputs[0], d);
            }
            OpKind::MaxOverAxis { axis } => {
                let (outer, extent, inner) = axis_split(&x.shape, *axis);
                let mut data = vec![0.0; x.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let e = node.aux[o * inner + i];
                        data[(o * extent + e) * inner + i] = g.data[o * inner + i];
                    }
                }
                self.accumulate(grads, inputs[0], Tensor { shape: x.shape.clone(), data });
            }
        }
    }
}

/// Compares the tape gradient of a scalar function against central
/// differences and returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn gradient_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    if !tape.value(y).item().is_finite() {
        return Err(AutodiffError::NonFinite(0));
    }
    let grads = tape.backward(y)?;
    let analytic = grads.get_or_zeros(xv, x.shape());

    let eval = |point: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(point);
        let out = f(&mut t, v)?;
        Ok(t.value(out).item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data[i] += h;
        let mut minus = x.clone();
        minus.data[i] -= h;
        let fp = eval(plus)?;
        let fm = eval(minus)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(AutodiffError::NonFinite(i));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec())
    }

    #[test]
    fn add_values() {
        let mut t = Tape::new();
        let a = t.constant(vec_t(&[1.0, 2.0]));
        let b = t.constant(vec_t(&[3.0, 4.0]));
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = t.constant(Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let p = t.matmul(i, m).unwrap();
        assert_eq!(t.value(p).data(), &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(t.shape(p), &[2, 2]);
    }

    #[test]
    fn relu_values() {
        let mut t = Tape::new();
        let a = t.constant(vec_t(&[-1.0, 0.0, 2.0]));
        let r = t.relu(a);
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut t = Tape::new();
        let a = t.constant(vec_t(&[1.0, 2.0]));
        let b = t.constant(vec_t(&[1.0, 2.0, 3.0]));
        let err = t.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2]") && msg.contains("[3]"), "{msg}");
        let m = t.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let err = t.matmul(m, m).unwrap_err();
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut t = Tape::new();
        let x = t.param(vec_t(&[1.0, 2.0]));
        let s = t.square(x);
        let l = t.sum(s);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_sin_at_zero() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(0.0));
        let y = t.sin(x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 1.0);
    }

    #[test]
    fn kink_conventions_are_zero() {
        for op in ["relu", "abs", "clamp", "sqrt"] {
            let mut t = Tape::new();
            let x = t.param(Tensor::scalar(0.0));
            let y = match op {
                "relu" => t.relu(x),
                "abs" => t.abs(x),
                "clamp" => t.clamp_min(x, 0.0),
                _ => t.sqrt(x).unwrap(),
            };
            let g = t.backward(y).unwrap();
            assert_eq!(g.get(x).unwrap().item(), 0.0, "{op}");
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.param(vec_t(&[1.0, 2.0]));
        let y = t.square(x);
        assert!(matches!(t.backward(y), Err(AutodiffError::NonScalarLoss(_))));
        let empty = Tape::new();
        assert!(matches!(empty.backward(Var(0)), Err(AutodiffError::EmptyTape)));
    }

    #[test]
    fn reused_operand_accumulates() {
        // f = x*x + x  =>  f' = 2x + 1
        let mut t = Tape::new();
        let x = t.param(vec_t(&[1.5, -2.0, 0.25]));
        let xx = t.mul(x, x).unwrap();
        let f = t.add(xx, x).unwrap();
        let l = t.sum(f);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0, -3.0, 1.5]);
    }

    #[test]
    fn max_over_axis_ties_pick_first() {
        let mut t = Tape::new();
        let x = t.param(Tensor::matrix(2, 3, vec![1.0, 3.0, 3.0, 2.0, 2.0, 0.0]).unwrap());
        let m = t.max_over_axis(x, 1).unwrap();
        assert_eq!(t.value(m).data(), &[3.0, 2.0]);
        let l = t.sum(m);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_and_slice_round_trip_gradients() {
        let mut t = Tape::new();
        let a = t.param(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let b = t.param(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = t.slice(c, 1, 1, 1).unwrap();
        assert_eq!(t.value(s).data(), &[3.0, 5.0]);
        let l = t.sum(s);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 0.0, 1.0, 0.0]);
        assert!(g.get(a).map_or(true, |ga| ga.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn gradient_check_sum_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = vec_t(&(0..8).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<_>>());
        let err = gradient_check(
            |t, v| {
                let s = t.square(v);
                Ok(t.sum(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    /// Builds a random scalar function exercising one op.
    fn apply_op(t: &mut Tape, op: usize, x: Var, other: Var) -> Result<Var> {
        let y = match op {
            0 => t.add(x, other)?,
            1 => t.sub(x, other)?,
            2 => t.mul(x, other)?,
            3 => t.scale(x, -1.7),
            4 => t.add_scalar(x, 0.3),
            5 => {
                let a = t.reshape(x, &[2, 3])?;
                let b = t.reshape(other, &[3, 2])?;
                t.matmul(a, b)?
            }
            6 => t.concat(&[x, other], 0)?,
            7 => t.slice(x, 0, 1, 3)?,
            8 => t.sin(x),
            9 => t.cos(x),
            10 => {
                let a = t.abs(x);
                t.sqrt(a)?
            }
            11 => t.square(x),
            12 => t.relu(x),
            13 => t.clamp_min(x, 0.0),
            14 => t.abs(x),
            15 => {
                let a = t.reshape(x, &[3, 2])?;
                t.max_over_axis(a, 1)?
            }
            16 => t.tanh(x),
            17 => {
                let m = t.mean(x);
                t.mul(m, x)?
            }
            _ => unreachable!(),
        };
        // A non-uniform weighting so every output element matters.
        let w = t.constant(Tensor::vector((0..t.value(y).len()).map(|i| 0.5 + i as f64).collect()));
        let yf = t.reshape(y, &[t.value(y).len()])?;
        let wy = t.mul(yf, w)?;
        Ok(t.sum(wy))
    }

    #[test]
    fn every_op_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for op in 0..18 {
            for _ in 0..100 {
                let draw = |rng: &mut ChaCha8Rng| {
                    let mut v: f64 = rng.gen_range(-2.0..2.0);
                    if v.abs() < 1e-2 {
                        v += 0.1;
                    }
                    v
                };
                let mut xs: Vec<f64> = (0..6).map(|_| draw(&mut rng)).collect();
                if op == 15 {
                    // keep the per-row maximum unique
                    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    for (i, v) in xs.iter_mut().enumerate() {
                        *v += 0.05 * i as f64;
                    }
                }
                let other = Tensor::vector((0..6).map(|_| draw(&mut rng)).collect());
                let x = Tensor::vector(xs);
                let err = gradient_check(
                    |t, v| {
                        let o = t.constant(other.clone());
                        apply_op(t, op, v, o)
                    },
                    &x,
                    1e-6,
                )
                .unwrap();
                assert!(err <= 1e-4, "op {op}: {err}");
            }
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut t = Tape::new();
            let w = t.param(Tensor::matrix(3, 4, (0..12).map(|_| rng.gen::<f64>()).collect()).unwrap());
            let x = t.constant(Tensor::matrix(2, 3, (0..6).map(|_| rng.gen::<f64>()).collect()).unwrap());
            let h = t.matmul(x, w).unwrap();
            let a = t.tanh(h);
            let l = t.mean(a);
            t.backward(l).unwrap().get(w).unwrap().clone()
        };
        let a = run();
        let b = run();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }
}
