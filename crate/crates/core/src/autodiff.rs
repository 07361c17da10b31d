//! Tape-based reverse-mode automatic differentiation over dense `f64`
//! tensors.
//!
//! Every operation on a [`Tape`] evaluates eagerly and appends a node that
//! remembers its inputs. [`Tape::backward`] walks the nodes once in reverse
//! order and accumulates exact gradients for every leaf.
//!
//! Binary elementwise operations follow NumPy broadcasting rules. Besides
//! the generic primitives the tape carries a few fused rigid-body kernels
//! (axis rotations, rotation-vector exponentials, batched small matrix
//! products, pinhole projection) so that forward kinematics over a batch of
//! time samples records a few hundred nodes instead of hundreds of
//! thousands.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: &'static str },
    #[error("gradient requested for non-scalar output of shape {0:?}")]
    NotScalar(Vec<usize>),
}

/// A dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, AdError> {
        if numel(shape) != data.len() {
            return Err(AdError::InvalidArgument {
                op: "tensor",
                msg: "value count does not match shape",
            });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; numel(shape)] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: Vec::new(), data: vec![v] }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pinhole {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Depth below which a projected point is treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Atan2(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sin(Var),
    Cos(Var),
    Sqrt(Var),
    Abs(Var),
    Huber(Var, f64),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    NormLast(Var),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, ta: bool, tb: bool },
    Concat(Vec<Var>, usize),
    IndexSelect(Var, usize, Vec<usize>),
    Reshape(Var),
    AxisRotation(Var, [f64; 3]),
    RotvecToMatrix(Var),
    RotvecToQuat(Var),
    Project(Var, Pinhole),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Atan2(..) => "atan2",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Tanh(_) => "tanh",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::Sqrt(_) => "sqrt",
            Op::Abs(_) => "abs",
            Op::Huber(..) => "huber",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::NormLast(_) => "norm_last",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Concat(..) => "concat",
            Op::IndexSelect(..) => "index_select",
            Op::Reshape(_) => "reshape",
            Op::AxisRotation(..) => "axis_rotation",
            Op::RotvecToMatrix(_) => "rotvec_to_matrix",
            Op::RotvecToQuat(_) => "rotvec_to_quat",
            Op::Project(..) => "project",
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    label: Option<&'static str>,
}

/// The operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

/// Location of the first non-finite value found on a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct NonFiniteNode {
    pub node: usize,
    pub op: &'static str,
    pub label: Option<&'static str>,
}

impl fmt::Display for NonFiniteNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.label {
            Some(l) => write!(f, "node {} ({}, '{}')", self.node, self.op, l),
            None => write!(f, "node {} ({})", self.node, self.op),
        }
    }
}

/// Gradients of a scalar with respect to every node that required them.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zero-filled when nothing flowed into it.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.value(v).len()],
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` (zero along broadcast dims).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out);
    if n == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for i in 0..n {
        f(i, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn skew(a: [f64; 3]) -> [[f64; 3]; 3] {
    [[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]]
}

fn m3mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    core::array::from_fn(|i| core::array::from_fn(|j| a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j]))
}

/// Coefficients of `R = I + a·K + b·K²` with `K = [r]×` and their radial
/// derivatives divided by θ.
fn rodrigues_coeffs(theta: f64) -> (f64, f64, f64, f64) {
    let t2 = theta * theta;
    if theta < 1e-2 {
        let a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0;
        let b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0;
        let c = -1.0 / 3.0 + t2 / 30.0 - t2 * t2 / 840.0;
        let d = -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0;
        (a, b, c, d)
    } else {
        let (s, co) = (libm::sin(theta), libm::cos(theta));
        let a = s / theta;
        let b = (1.0 - co) / t2;
        let c = (theta * co - s) / (t2 * theta);
        let d = (theta * s - 2.0 * (1.0 - co)) / (t2 * t2);
        (a, b, c, d)
    }
}

/// `sin(θ/2)/θ` and its radial derivative divided by θ.
fn half_angle_coeffs(theta: f64) -> (f64, f64) {
    let t2 = theta * theta;
    if theta < 1e-2 {
        (
            0.5 - t2 / 48.0 + t2 * t2 / 3840.0,
            -1.0 / 24.0 + t2 / 960.0 - t2 * t2 / 107_520.0,
        )
    } else {
        let h = 0.5 * theta;
        let s = libm::sin(h) / theta;
        let e = (h * libm::cos(h) - libm::sin(h)) / (t2 * theta);
        (s, e)
    }
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad, label: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Attaches a name used in non-finite diagnostics.
    pub fn label(&mut self, v: Var, label: &'static str) -> Var {
        self.nodes[v.0].label = Some(label);
        v
    }

    /// A differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.data, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.data, Op::Constant, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn first_non_finite(&self) -> Option<NonFiniteNode> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            n.value.iter().any(|v| !v.is_finite()).then(|| NonFiniteNode {
                node: i,
                op: n.op.name(),
                label: n.label,
            })
        })
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Var, Var) -> Op,
    ) -> Result<Var, AdError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(&sa, &sb).ok_or(AdError::ShapeMismatch { op, lhs: sa.clone(), rhs: sb.clone() })?;
        let mut value = vec![0.0; numel(&out)];
        {
            let (va, vb) = (self.value(a), self.value(b));
            if sa == sb {
                for ((o, x), y) in value.iter_mut().zip(va).zip(vb) {
                    *o = f(*x, *y);
                }
            } else {
                let (ta, tb) = (broadcast_strides(&sa, &out), broadcast_strides(&sb, &out));
                for_each_broadcast(&out, &ta, &tb, |i, ia, ib| value[i] = f(va[ia], vb[ib]));
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, value, make(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div)
    }

    pub fn atan2(&mut self, y: Var, x: Var) -> Result<Var, AdError> {
        self.binary(y, x, "atan2", libm::atan2, Op::Atan2)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).iter().map(|x| f(*x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, value, op, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, libm::tanh, Op::Tanh(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, libm::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, libm::cos, Op::Cos(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, libm::sqrt, Op::Sqrt(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, libm::fabs, Op::Abs(a))
    }

    /// Elementwise Huber penalty: `0.5·e²` for `|e| ≤ δ`, else `δ·(|e| − δ/2)`.
    pub fn huber(&mut self, a: Var, delta: f64) -> Result<Var, AdError> {
        if !(delta > 0.0) {
            return Err(AdError::InvalidArgument { op: "huber", msg: "delta must be positive" });
        }
        Ok(self.unary(a, |e| huber(e, delta), Op::Huber(a, delta)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(Vec::new(), vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AdError> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(AdError::InvalidArgument { op: "mean", msg: "empty tensor" });
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        Ok(self.push(Vec::new(), vec![m], Op::Mean(a), rg))
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, AdError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(AdError::InvalidArgument { op: "sum_axis", msg: "axis out of range" });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(a);
        let mut value = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for i in 0..inner {
                    value[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out = shape.clone();
        out.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(out, value, Op::SumAxis(a, axis), rg))
    }

    /// Euclidean norm over the last axis. The gradient at a zero vector is
    /// taken as zero.
    pub fn norm_last(&mut self, a: Var) -> Result<Var, AdError> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or(AdError::InvalidArgument { op: "norm_last", msg: "scalar input" })?;
        let value: Vec<f64> = self
            .value(a)
            .chunks(d.max(1))
            .map(|c| libm::sqrt(c.iter().map(|x| x * x).sum()))
            .collect();
        let out = shape[..shape.len() - 1].to_vec();
        let rg = self.rg(a);
        Ok(self.push(out, value, Op::NormLast(a), rg))
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AdError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut value = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut value, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], value, Op::MatMul(a, b), rg))
    }

    /// Batched product of the last two axes. Either operand may be a plain
    /// matrix, broadcast across the batch; `ta`/`tb` transpose that operand's
    /// last two axes.
    pub fn batch_matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, AdError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let dims = bmm_dims(&sa, &sb, ta, tb).ok_or(AdError::ShapeMismatch {
            op: "batch_matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let BmmDims { batch, m, k, n, a_batched, b_batched } = dims;
        let mut value = vec![0.0; batch * m * n];
        let (va, vb) = (self.value(a), self.value(b));
        for bi in 0..batch {
            let oa = if a_batched { bi * m * k } else { 0 };
            let ob = if b_batched { bi * k * n } else { 0 };
            small_gemm(m, k, n, &va[oa..oa + m * k], ta, &vb[ob..ob + k * n], tb, &mut value[bi * m * n..(bi + 1) * m * n]);
        }
        let mut out = if a_batched { sa[..sa.len() - 2].to_vec() } else { sb[..sb.len() - 2].to_vec() };
        out.push(m);
        out.push(n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, value, Op::BatchMatMul { a, b, ta, tb }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, AdError> {
        let first = *parts.first().ok_or(AdError::InvalidArgument { op: "concat", msg: "no inputs" })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(AdError::InvalidArgument { op: "concat", msg: "axis out of range" });
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(AdError::ShapeMismatch { op: "concat", lhs: base.clone(), rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = base.clone();
        out[axis] = total;
        let mut value = vec![0.0; numel(&out)];
        let mut offset = 0;
        for p in parts {
            let len = self.shape(*p)[axis];
            let src = self.value(*p);
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                value[dst..dst + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
            offset += len;
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(out, value, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Gathers `indices` along `axis` (indices may repeat).
    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var, AdError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(AdError::InvalidArgument { op: "index_select", msg: "axis out of range" });
        }
        if indices.iter().any(|i| *i >= shape[axis]) {
            return Err(AdError::InvalidArgument { op: "index_select", msg: "index out of range" });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(a);
        let mut value = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let s = (o * len + i) * inner;
                value.extend_from_slice(&src[s..s + inner]);
            }
        }
        let mut out = shape;
        out[axis] = indices.len();
        let rg = self.rg(a);
        Ok(self.push(out, value, Op::IndexSelect(a, axis, indices.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AdError> {
        if numel(shape) != self.value(a).len() {
            return Err(AdError::ShapeMismatch { op: "reshape", lhs: self.shape(a).to_vec(), rhs: shape.to_vec() });
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), rg))
    }

    /// `[B]` angles to `[B,3,3]` rotations about a fixed unit axis.
    pub fn axis_rotation(&mut self, theta: Var, axis: [f64; 3]) -> Result<Var, AdError> {
        let n = libm::sqrt(axis.iter().map(|x| x * x).sum());
        if !(n > 0.0) {
            return Err(AdError::InvalidArgument { op: "axis_rotation", msg: "zero axis" });
        }
        let axis = axis.map(|x| x / n);
        let shape = self.shape(theta).to_vec();
        let k = skew(axis);
        let mut value = Vec::with_capacity(shape.iter().product::<usize>() * 9);
        for &t in self.value(theta) {
            let (s, c) = (libm::sin(t), libm::cos(t));
            for i in 0..3 {
                for j in 0..3 {
                    let eye = if i == j { 1.0 } else { 0.0 };
                    value.push(c * eye + s * k[i][j] + (1.0 - c) * axis[i] * axis[j]);
                }
            }
        }
        let mut out = shape;
        out.extend_from_slice(&[3, 3]);
        let rg = self.rg(theta);
        Ok(self.push(out, value, Op::AxisRotation(theta, axis), rg))
    }

    /// Exponential map `[..,3]` rotation vectors to `[..,3,3]` matrices.
    pub fn rotvec_to_matrix(&mut self, r: Var) -> Result<Var, AdError> {
        let shape = self.shape(r).to_vec();
        if shape.last() != Some(&3) {
            return Err(AdError::InvalidArgument { op: "rotvec_to_matrix", msg: "last axis must be 3" });
        }
        let mut value = Vec::with_capacity(self.value(r).len() * 3);
        for v in self.value(r).chunks(3) {
            let v = [v[0], v[1], v[2]];
            let theta = libm::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
            let (a, b, _, _) = rodrigues_coeffs(theta);
            let k = skew(v);
            let k2 = m3mul(&k, &k);
            for i in 0..3 {
                for j in 0..3 {
                    let eye = if i == j { 1.0 } else { 0.0 };
                    value.push(eye + a * k[i][j] + b * k2[i][j]);
                }
            }
        }
        let mut out = shape[..shape.len() - 1].to_vec();
        out.extend_from_slice(&[3, 3]);
        let rg = self.rg(r);
        Ok(self.push(out, value, Op::RotvecToMatrix(r), rg))
    }

    /// `[..,3]` rotation vectors to `[..,4]` unit quaternions `(w,x,y,z)`.
    pub fn rotvec_to_quat(&mut self, r: Var) -> Result<Var, AdError> {
        let shape = self.shape(r).to_vec();
        if shape.last() != Some(&3) {
            return Err(AdError::InvalidArgument { op: "rotvec_to_quat", msg: "last axis must be 3" });
        }
        let mut value = Vec::with_capacity(self.value(r).len() / 3 * 4);
        for v in self.value(r).chunks(3) {
            let theta = libm::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
            let (s, _) = half_angle_coeffs(theta);
            value.extend_from_slice(&[libm::cos(0.5 * theta), s * v[0], s * v[1], s * v[2]]);
        }
        let mut out = shape;
        *out.last_mut().unwrap() = 4;
        let rg = self.rg(r);
        Ok(self.push(out, value, Op::RotvecToQuat(r), rg))
    }

    /// Pinhole projection of `[..,3]` camera-frame points to `[..,2]`
    /// pixels. Points with depth below [`MIN_DEPTH`] map to `(0,0)` with
    /// zero gradient; callers mask them out of losses.
    pub fn project(&mut self, x: Var, k: Pinhole) -> Result<Var, AdError> {
        let shape = self.shape(x).to_vec();
        if shape.last() != Some(&3) {
            return Err(AdError::InvalidArgument { op: "project", msg: "last axis must be 3" });
        }
        let mut value = Vec::with_capacity(self.value(x).len() / 3 * 2);
        for p in self.value(x).chunks(3) {
            if p[2] < MIN_DEPTH {
                value.extend_from_slice(&[0.0, 0.0]);
            } else {
                value.extend_from_slice(&[k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy]);
            }
        }
        let mut out = shape;
        *out.last_mut().unwrap() = 2;
        let rg = self.rg(x);
        Ok(self.push(out, value, Op::Project(x, k), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AdError> {
        let ls = self.shape(loss);
        if numel(ls) != 1 {
            return Err(AdError::NotScalar(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        // only leaves and nodes that flowed keep gradients
        Ok(Gradients { grads })
    }

    fn with_grad(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !nodes[v.0].requires_grad {
            return;
        }
        let mut buf = grads[v.0].take().unwrap_or_else(|| vec![0.0; nodes[v.0].value.len()]);
        f(&mut buf);
        grads[v.0] = Some(buf);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.broadcast_backward(node, *a, *b, g, grads, |_, _, gi| (gi, sign * gi));
            }
            Op::Mul(a, b) => self.broadcast_backward(node, *a, *b, g, grads, |x, y, gi| (gi * y, gi * x)),
            Op::Div(a, b) => self.broadcast_backward(node, *a, *b, g, grads, |x, y, gi| (gi / y, -gi * x / (y * y))),
            Op::Atan2(a, b) => self.broadcast_backward(node, *a, *b, g, grads, |y, x, gi| {
                let r = x * x + y * y;
                if r == 0.0 {
                    (0.0, 0.0)
                } else {
                    (gi * x / r, -gi * y / r)
                }
            }),
            Op::Neg(a) => {
                Self::with_grad(nodes, grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(o, gi)| *o -= gi);
                });
            }
            Op::Scale(a, c) => {
                Self::with_grad(nodes, grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(o, gi)| *o += gi * c);
                });
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                Self::with_grad(nodes, grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(o, gi)| *o += gi);
                });
            }
            Op::Tanh(a) => {
                Self::with_grad(nodes, grads, *a, |ga| {
                    for ((o, gi), y) in ga.iter_mut().zip(g).zip(&node.value) {
                        *o += gi * (1.0 - y * y);
                    }
                });
            }
            Op::Sin(a) => {
                let x = &nodes[a.0].value;
                Self::with_grad(nodes, grads, *a, |ga| {
                    for ((o, gi), x) in ga.iter_mut().zip(g).zip(x) {
                        *o += gi * libm::cos(*x);
                    }
                });
            }
            Op::Cos(a) => {
                let x = &nodes[a.0].value;
                Self::with_grad(nodes, grads, *a, |ga| {
                    for ((o, gi), x) in ga.iter_mut().zip(g).zip(x) {
                        *o -= gi * libm::sin(*x);
                    }
                });
            }
            Op::Sqrt(a) => {
                Self::with_grad(nodes, grads, *a, |ga| {
                    for ((o, gi), y) in ga.iter_mut().zip(g).zip(&node.value) {
                        *o += gi * 0.5 / y;
                    }
                });
            }
            Op::Abs(a) => {
                let x = &nodes[a.0].value;
                Self::with_grad(nodes, grads, *a, |ga| {
                    for ((o, gi), x) in ga.iter_mut().zip(g).zip(x) {
                        *o += gi * sign(*x);
                    }
                });
            }
            Op::Huber(a, delta) => {
                let x = &nodes[a.0].value;
                Self::with_grad(nodes, grads, *a, |ga| {
                    for ((o, gi), e) in ga.iter_mut().zip(g).zip(x) {
                        *o += gi * huber_grad(*e, *delta);
                    }
                });
            }
            Op::Sum(a) => {
                Self::with_grad(nodes, grads, *a, |ga| {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                });
            }
            Op::Mean(a) => {
                Self::with_grad(nodes, grads, *a, |ga| {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|o| *o += s);
                });
            }
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = split_axis(&nodes[a.0].shape, *axis);
                Self::with_grad(nodes, grads, *a, |ga| {
                    for o in 0..outer {
                        for k in 0..len {
                            let base = (o * len + k) * inner;
                            for i in 0..inner {
                                ga[base + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::NormLast(a) => {
                let x = &nodes[a.0].value;
                let d = *nodes[a.0].shape.last().unwrap();
                Self::with_grad(nodes, grads, *a, |ga| {
                    for (r, (gi, nrm)) in g.iter().zip(&node.value).enumerate() {
                        if *nrm > 0.0 {
                            for j in 0..d {
                                ga[r * d + j] += gi * x[r * d + j] / nrm;
                            }
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                Self::with_grad(nodes, grads, *a, |ga| {
                    // dA = G · Bᵀ
                    gemm(m, n, k, g, false, vb, true, ga, 1.0);
                });
                Self::with_grad(nodes, grads, *b, |gb| {
                    // dB = Aᵀ · G
                    gemm(k, m, n, va, true, g, false, gb, 1.0);
                });
            }
            Op::BatchMatMul { a, b, ta, tb } => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let BmmDims { batch, m, k, n, a_batched, b_batched } = bmm_dims(sa, sb, *ta, *tb).unwrap();
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                Self::with_grad(nodes, grads, *a, |ga| {
                    for bi in 0..batch {
                        let oa = if a_batched { bi * m * k } else { 0 };
                        let ob = if b_batched { bi * k * n } else { 0 };
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let bs = &vb[ob..ob + k * n];
                        let gas = &mut ga[oa..oa + m * k];
                        // op(A) = G·op(B)ᵀ, stored back through the transpose flag
                        for i in 0..m {
                            for l in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    let bv = if *tb { bs[j * k + l] } else { bs[l * n + j] };
                                    s += gs[i * n + j] * bv;
                                }
                                if *ta {
                                    gas[l * m + i] += s;
                                } else {
                                    gas[i * k + l] += s;
                                }
                            }
                        }
                    }
                });
                Self::with_grad(nodes, grads, *b, |gb| {
                    for bi in 0..batch {
                        let oa = if a_batched { bi * m * k } else { 0 };
                        let ob = if b_batched { bi * k * n } else { 0 };
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let as_ = &va[oa..oa + m * k];
                        let gbs = &mut gb[ob..ob + k * n];
                        for l in 0..k {
                            for j in 0..n {
                                let mut s = 0.0;
                                for i in 0..m {
                                    let av = if *ta { as_[l * m + i] } else { as_[i * k + l] };
                                    s += av * gs[i * n + j];
                                }
                                if *tb {
                                    gbs[j * k + l] += s;
                                } else {
                                    gbs[l * n + j] += s;
                                }
                            }
                        }
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].shape[*axis];
                    Self::with_grad(nodes, grads, *p, |gp| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            for (d, s) in gp[o * len * inner..(o + 1) * len * inner].iter_mut().zip(&g[src..src + len * inner]) {
                                *d += s;
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::IndexSelect(a, axis, indices) => {
                let (outer, len, inner) = split_axis(&nodes[a.0].shape, *axis);
                Self::with_grad(nodes, grads, *a, |ga| {
                    let sel = indices.len();
                    for o in 0..outer {
                        for (r, &i) in indices.iter().enumerate() {
                            let dst = (o * len + i) * inner;
                            let src = (o * sel + r) * inner;
                            for q in 0..inner {
                                ga[dst + q] += g[src + q];
                            }
                        }
                    }
                });
            }
            Op::AxisRotation(a, axis) => {
                let x = &nodes[a.0].value;
                let k = skew(*axis);
                Self::with_grad(nodes, grads, *a, |ga| {
                    for (r, t) in x.iter().enumerate() {
                        let (s, c) = (libm::sin(*t), libm::cos(*t));
                        let mut acc = 0.0;
                        for i in 0..3 {
                            for j in 0..3 {
                                let eye = if i == j { 1.0 } else { 0.0 };
                                let d = -s * eye + c * k[i][j] + s * axis[i] * axis[j];
                                acc += d * g[r * 9 + i * 3 + j];
                            }
                        }
                        ga[r] += acc;
                    }
                });
            }
            Op::RotvecToMatrix(a) => {
                let x = &nodes[a.0].value;
                Self::with_grad(nodes, grads, *a, |ga| {
                    for (r, v) in x.chunks(3).enumerate() {
                        let v = [v[0], v[1], v[2]];
                        let theta = libm::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
                        let (ca, cb, cc, cd) = rodrigues_coeffs(theta);
                        let k = skew(v);
                        let k2 = m3mul(&k, &k);
                        let gr = &g[r * 9..r * 9 + 9];
                        for c in 0..3 {
                            let mut e = [0.0; 3];
                            e[c] = 1.0;
                            let ec = skew(e);
                            let ek = m3mul(&ec, &k);
                            let ke = m3mul(&k, &ec);
                            let mut acc = 0.0;
                            for i in 0..3 {
                                for j in 0..3 {
                                    let d = cc * v[c] * k[i][j] + ca * ec[i][j] + cd * v[c] * k2[i][j] + cb * (ek[i][j] + ke[i][j]);
                                    acc += d * gr[i * 3 + j];
                                }
                            }
                            ga[r * 3 + c] += acc;
                        }
                    }
                });
            }
            Op::RotvecToQuat(a) => {
                let x = &nodes[a.0].value;
                Self::with_grad(nodes, grads, *a, |ga| {
                    for (r, v) in x.chunks(3).enumerate() {
                        let theta = libm::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
                        let (s, e) = half_angle_coeffs(theta);
                        let gq = &g[r * 4..r * 4 + 4];
                        for i in 0..3 {
                            let mut acc = -0.5 * s * v[i] * gq[0];
                            for j in 0..3 {
                                let eye = if i == j { 1.0 } else { 0.0 };
                                acc += (s * eye + e * v[i] * v[j]) * gq[1 + j];
                            }
                            ga[r * 3 + i] += acc;
                        }
                    }
                });
            }
            Op::Project(a, k) => {
                let x = &nodes[a.0].value;
                Self::with_grad(nodes, grads, *a, |ga| {
                    for (r, p) in x.chunks(3).enumerate() {
                        if p[2] < MIN_DEPTH {
                            continue;
                        }
                        let (gu, gv) = (g[r * 2], g[r * 2 + 1]);
                        let iz = 1.0 / p[2];
                        ga[r * 3] += gu * k.fx * iz;
                        ga[r * 3 + 1] += gv * k.fy * iz;
                        ga[r * 3 + 2] -= (gu * k.fx * p[0] + gv * k.fy * p[1]) * iz * iz;
                    }
                });
            }
        }
    }

    fn broadcast_backward(
        &self,
        node: &Node,
        a: Var,
        b: Var,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        f: impl Fn(f64, f64, f64) -> (f64, f64),
    ) {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let (ta, tb) = (broadcast_strides(&na.shape, &node.shape), broadcast_strides(&nb.shape, &node.shape));
        let mut da = na.requires_grad.then(|| vec![0.0; na.value.len()]);
        let mut db = nb.requires_grad.then(|| vec![0.0; nb.value.len()]);
        for_each_broadcast(&node.shape, &ta, &tb, |i, ia, ib| {
            let (x, y) = f(na.value[ia], nb.value[ib], g[i]);
            if let Some(d) = da.as_mut() {
                d[ia] += x;
            }
            if let Some(d) = db.as_mut() {
                d[ib] += y;
            }
        });
        for (v, d) in [(a, da), (b, db)] {
            if let Some(d) = d {
                match grads[v.0].as_mut() {
                    Some(acc) => acc.iter_mut().zip(d).for_each(|(o, x)| *o += x),
                    None => grads[v.0] = Some(d),
                }
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

struct BmmDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
}

fn bmm_dims(sa: &[usize], sb: &[usize], ta: bool, tb: bool) -> Option<BmmDims> {
    if sa.len() < 2 || sb.len() < 2 {
        return None;
    }
    let (ar, ac) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (br, bc) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return None;
    }
    let (pa, pb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
    let (a_batched, b_batched) = (!pa.is_empty(), !pb.is_empty());
    if a_batched && b_batched && pa != pb {
        return None;
    }
    let batch = if a_batched { numel(pa) } else { numel(pb) };
    Some(BmmDims { batch, m, k, n, a_batched, b_batched })
}

/// `C = op(A)·op(B) + beta·C` for row-major buffers; `A` is stored as
/// `m×k` (or `k×m` when transposed).
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the buffers hold exactly the extents described by the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn small_gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64]) {
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for l in 0..k {
                let av = if ta { a[l * m + i] } else { a[i * k + l] };
                let bv = if tb { b[j * k + l] } else { b[l * n + j] };
                s += av * bv;
            }
            c[i * n + j] = s;
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Huber penalty, quadratic inside `delta` and linear outside.
pub fn huber(e: f64, delta: f64) -> f64 {
    let a = libm::fabs(e);
    if a <= delta {
        0.5 * e * e
    } else {
        delta * (a - 0.5 * delta)
    }
}

pub fn huber_grad(e: f64, delta: f64) -> f64 {
    if libm::fabs(e) <= delta {
        e
    } else {
        delta * sign(e)
    }
}
