use super::tensor::{numel, DiffTensor};
use super::NumericsError;
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise binary kernels. Operands broadcast with NumPy rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
}

/// Every differentiable kernel the tape knows how to record.
///
/// [`Tape::apply`] dispatches on this; the typed helper methods on [`Tape`]
/// are thin wrappers around the same code paths.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive<T> {
    MatMul,
    Transpose,
    Binary(BinaryKind),
    Scale(T),
    AddScalar(T),
    Unary(UnaryKind),
    Softmax { axis: usize },
    LogSumExp { axis: usize },
    Sum { axis: usize },
    Mean { axis: usize },
    SumAll,
    /// Normalizes over the last axis; affine scale and shift are separate ops.
    LayerNorm { eps: T },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Reshape { shape: Vec<usize> },
    GatherRows { rows: Vec<usize> },
    Gather { indices: Vec<usize> },
    /// Keeps entries where `keep` is true and writes `fill` elsewhere.
    WhereMask { keep: Vec<bool>, fill: T },
    Pad2d { rows: usize, cols: usize, row_offset: usize, col_offset: usize },
    /// Row-wise grouped outer product: for `a, b` of shape `P x d` split into
    /// `groups` blocks of width `k = d / groups`, output row `p` holds
    /// `a[p, g*k + i] * b[p, g*k + j]` at column `g*k*k + i*k + j`.
    GroupedOuter { groups: usize },
}

impl<T> Primitive<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Binary(BinaryKind::Add) => "add",
            Primitive::Binary(BinaryKind::Sub) => "sub",
            Primitive::Binary(BinaryKind::Mul) => "mul",
            Primitive::Binary(BinaryKind::Div) => "div",
            Primitive::Scale(_) => "scale",
            Primitive::AddScalar(_) => "add_scalar",
            Primitive::Unary(UnaryKind::Relu) => "relu",
            Primitive::Unary(UnaryKind::Tanh) => "tanh",
            Primitive::Unary(UnaryKind::Sigmoid) => "sigmoid",
            Primitive::Unary(UnaryKind::Exp) => "exp",
            Primitive::Unary(UnaryKind::Log) => "log",
            Primitive::Softmax { .. } => "softmax",
            Primitive::LogSumExp { .. } => "logsumexp",
            Primitive::Sum { .. } => "sum",
            Primitive::Mean { .. } => "mean",
            Primitive::SumAll => "sum_all",
            Primitive::LayerNorm { .. } => "layer_norm",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Reshape { .. } => "reshape",
            Primitive::GatherRows { .. } => "gather_rows",
            Primitive::Gather { .. } => "gather",
            Primitive::WhereMask { .. } => "where_mask",
            Primitive::Pad2d { .. } => "pad2d",
            Primitive::GroupedOuter { .. } => "grouped_outer",
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Binary(BinaryKind, Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Unary(UnaryKind, Var),
    Map(Var, Vec<T>),
    Softmax(Var, usize),
    LogSumExp(Var, usize),
    Sum(Var, usize),
    Mean(Var, usize),
    SumAll(Var),
    LayerNorm(Var, Vec<T>),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    WhereMask(Var, Vec<bool>),
    Pad2d(Var, usize, usize),
    GroupedOuter(Var, Var, usize),
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], kept for leaf nodes only.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a leaf, or `None` if the leaf does not
    /// require gradients or does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`get`](Self::get) but returns zeros for leaves off the loss path.
    pub fn get_or_zeros(&self, tape: &Tape<T>, v: Var) -> Vec<T> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); tape.value(v).len()],
        }
    }
}

/// Records primitive applications for one forward pass.
///
/// Node order is the order of recording, which is a topological order, so
/// `backward` replays nodes in reverse index order exactly once each.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(
    op: &'static str,
    shape: &[usize],
    axis: usize,
) -> Result<(usize, usize, usize), NumericsError> {
    if axis >= shape.len() {
        return Err(NumericsError::AxisOutOfRange {
            op,
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s[axis] = 1;
    s
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

/// Strides of `src` viewed through broadcast output shape `out` (0 on
/// broadcast dimensions).
fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let oi = i + rank - src.len();
        strides[oi] = if src[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= src[i];
    }
    strides
}

/// Visits every output position together with the matching input offsets.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel(out);
    if total == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
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

fn matmul_kernel<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn reduce_sum<T: Scalar>(v: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for k in 0..n {
            let base = (o * n + k) * inner;
            for (d, &t) in out[o * inner..(o + 1) * inner].iter_mut().zip(&v[base..base + inner]) {
                *d += t;
            }
        }
    }
    out
}

fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn acc_grad<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Copies the tensor into a detached [`DiffTensor`].
    pub fn to_tensor(&self, v: Var) -> DiffTensor<T> {
        let n = &self.nodes[v.0];
        DiffTensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes have valid shapes")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf holding a copy of `t`; differentiable iff `t` is.
    pub fn leaf(&mut self, t: &DiffTensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a differentiable leaf regardless of the tensor's flag.
    pub fn variable(&mut self, t: &DiffTensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, true)
    }

    /// Records a constant. Zero-sized dimensions are allowed here.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<T>) -> Result<Var, NumericsError> {
        if numel(&shape) != values.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "constant",
                expected: vec![numel(&shape)],
                actual: vec![values.len()],
            });
        }
        Ok(self.push(shape, values, Op::Leaf, false))
    }

    pub fn scalar_constant(&mut self, value: T) -> Var {
        self.push(vec![1], vec![value], Op::Leaf, false)
    }

    /// Cuts the gradient path: returns a constant copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    /// Applies a primitive by id.
    pub fn apply(&mut self, prim: &Primitive<T>, inputs: &[Var]) -> Result<Var, NumericsError> {
        let arity = match prim {
            Primitive::MatMul | Primitive::Binary(_) | Primitive::GroupedOuter { .. } => Some(2),
            Primitive::Concat { .. } => None,
            _ => Some(1),
        };
        if let Some(k) = arity {
            if inputs.len() != k {
                return Err(NumericsError::Arity {
                    op: prim.name(),
                    expected: k,
                    actual: inputs.len(),
                });
            }
        }
        match prim {
            Primitive::MatMul => self.matmul(inputs[0], inputs[1]),
            Primitive::Transpose => self.transpose(inputs[0]),
            Primitive::Binary(kind) => self.binary(*kind, inputs[0], inputs[1]),
            Primitive::Scale(c) => Ok(self.scale(inputs[0], *c)),
            Primitive::AddScalar(c) => Ok(self.add_scalar(inputs[0], *c)),
            Primitive::Unary(kind) => Ok(self.unary(*kind, inputs[0])),
            Primitive::Softmax { axis } => self.softmax(inputs[0], *axis),
            Primitive::LogSumExp { axis } => self.logsumexp(inputs[0], *axis),
            Primitive::Sum { axis } => self.sum(inputs[0], *axis),
            Primitive::Mean { axis } => self.mean(inputs[0], *axis),
            Primitive::SumAll => Ok(self.sum_all(inputs[0])),
            Primitive::LayerNorm { eps } => self.layer_norm(inputs[0], *eps),
            Primitive::Concat { axis } => self.concat(inputs, *axis),
            Primitive::Slice { axis, start, end } => self.slice(inputs[0], *axis, *start, *end),
            Primitive::Reshape { shape } => self.reshape(inputs[0], shape.clone()),
            Primitive::GatherRows { rows } => self.gather_rows(inputs[0], rows),
            Primitive::Gather { indices } => self.gather(inputs[0], indices),
            Primitive::WhereMask { keep, fill } => self.where_mask(inputs[0], keep, *fill),
            Primitive::Pad2d {
                rows,
                cols,
                row_offset,
                col_offset,
            } => self.pad2d(inputs[0], *rows, *cols, *row_offset, *col_offset),
            Primitive::GroupedOuter { groups } => self.grouped_outer(inputs[0], inputs[1], *groups),
        }
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize), NumericsError> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            _ => Err(NumericsError::RankMismatch {
                op,
                expected: 2,
                actual: self.shape(v).to_vec(),
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                expected: vec![k, n],
                actual: vec![k2, n],
            });
        }
        let mut out = vec![T::zero(); m * n];
        matmul_kernel(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (r, c) = self.matrix_dims("transpose", x)?;
        let v = self.value(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(vec![c, r], out, Op::Transpose(x), ng))
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let name = Primitive::<T>::Binary(kind).name();
        let out_shape = broadcast_shape(&sa, &sb).ok_or(NumericsError::ShapeMismatch {
            op: name,
            expected: sa.clone(),
            actual: sb.clone(),
        })?;
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let (va, vb) = (self.value(a), self.value(b));
        let out = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = vec![T::zero(); numel(&out_shape)];
            let (ta, tb) = (
                broadcast_strides(&sa, &out_shape),
                broadcast_strides(&sb, &out_shape),
            );
            for_each_broadcast(&out_shape, &ta, &tb, |o, ia, ib| out[o] = f(va[ia], vb[ib]));
            out
        };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out_shape, out, Op::Binary(kind, a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let (shape, ng) = (self.shape(x).to_vec(), self.ng(x));
        self.push(shape, out, Op::Scale(x, c), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).iter().map(|&v| v + c).collect();
        let (shape, ng) = (self.shape(x).to_vec(), self.ng(x));
        self.push(shape, out, Op::AddScalar(x), ng)
    }

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let f = |v: T| match kind {
            UnaryKind::Relu => v.max(T::zero()),
            UnaryKind::Tanh => v.tanh(),
            UnaryKind::Sigmoid => stable_sigmoid(v),
            UnaryKind::Exp => v.exp(),
            UnaryKind::Log => v.ln(),
        };
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let (shape, ng) = (self.shape(x).to_vec(), self.ng(x));
        self.push(shape, out, Op::Unary(kind, x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Log, x)
    }

    /// User-defined elementwise map with an explicit derivative.
    pub fn map(&mut self, x: Var, f: impl Fn(T) -> T, df: impl Fn(T) -> T) -> Var {
        let v = self.value(x);
        let out = v.iter().map(|&t| f(t)).collect();
        let deriv = v.iter().map(|&t| df(t)).collect();
        let (shape, ng) = (self.shape(x).to_vec(), self.ng(x));
        self.push(shape, out, Op::Map(x, deriv), ng)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis("softmax", &shape, axis)?;
        if n == 0 {
            return Err(NumericsError::EmptyAxis { op: "softmax", axis });
        }
        let v = self.value(x);
        let mut out = vec![T::zero(); v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let mut m = T::neg_infinity();
                for k in 0..n {
                    m = m.max(v[at(k)]);
                }
                let mut s = T::zero();
                for k in 0..n {
                    let e = (v[at(k)] - m).exp();
                    out[at(k)] = e;
                    s += e;
                }
                for k in 0..n {
                    out[at(k)] /= s;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(shape, out, Op::Softmax(x, axis), ng))
    }

    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis("logsumexp", &shape, axis)?;
        if n == 0 {
            return Err(NumericsError::EmptyAxis {
                op: "logsumexp",
                axis,
            });
        }
        let v = self.value(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let mut m = T::neg_infinity();
                for k in 0..n {
                    m = m.max(v[at(k)]);
                }
                out[o * inner + i] = if m.is_infinite() {
                    m
                } else {
                    let s: T = (0..n).map(|k| (v[at(k)] - m).exp()).sum();
                    m + s.ln()
                };
            }
        }
        let ng = self.ng(x);
        Ok(self.push(reduced_shape(&shape, axis), out, Op::LogSumExp(x, axis), ng))
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis("sum", &shape, axis)?;
        let out = reduce_sum(self.value(x), outer, n, inner);
        let ng = self.ng(x);
        Ok(self.push(reduced_shape(&shape, axis), out, Op::Sum(x, axis), ng))
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis("mean", &shape, axis)?;
        if n == 0 {
            return Err(NumericsError::EmptyAxis { op: "mean", axis });
        }
        let denom = T::from_usize_lossy(n);
        let mut out = reduce_sum(self.value(x), outer, n, inner);
        out.iter_mut().for_each(|v| *v /= denom);
        let ng = self.ng(x);
        Ok(self.push(reduced_shape(&shape, axis), out, Op::Mean(x, axis), ng))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let ng = self.ng(x);
        self.push(vec![1], vec![s], Op::SumAll(x), ng)
    }

    pub fn layer_norm(&mut self, x: Var, eps: T) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or(NumericsError::RankMismatch {
            op: "layer_norm",
            expected: 1,
            actual: shape.clone(),
        })?;
        if n == 0 {
            return Err(NumericsError::EmptyAxis {
                op: "layer_norm",
                axis: shape.len() - 1,
            });
        }
        let v = self.value(x);
        let rows = v.len() / n;
        let nt = T::from_usize_lossy(n);
        let mut out = vec![T::zero(); v.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &v[r * n..(r + 1) * n];
            let mu = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&t| (t - mu) * (t - mu)).sum::<T>() / nt;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (o, &t) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (t - mu) * is;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(shape, out, Op::LayerNorm(x, inv_std), ng))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, NumericsError> {
        let first = *xs.first().ok_or(NumericsError::Arity {
            op: "concat",
            expected: 1,
            actual: 0,
        })?;
        let base = self.shape(first).to_vec();
        split_axis("concat", &base, axis)?;
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat",
                    expected: base.clone(),
                    actual: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis("concat", &shape, axis)?;
        let mut out = vec![T::zero(); numel(&shape)];
        let mut offset = 0;
        for &x in xs {
            let n = self.shape(x)[axis];
            let v = self.value(x);
            for o in 0..outer {
                let src = &v[o * n * inner..(o + 1) * n * inner];
                let dst = (o * total + offset) * inner;
                out[dst..dst + n * inner].copy_from_slice(src);
            }
            offset += n;
        }
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(shape, out, Op::Concat(xs.to_vec(), axis), ng))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis("slice", &shape, axis)?;
        if start > end || end > n {
            return Err(NumericsError::SliceOutOfRange {
                start,
                end,
                len: n,
            });
        }
        let w = end - start;
        let v = self.value(x);
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let s = (o * n + start) * inner;
            out.extend_from_slice(&v[s..s + w * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = w;
        let ng = self.ng(x);
        Ok(self.push(oshape, out, Op::Slice(x, axis, start), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, NumericsError> {
        if numel(&shape) != self.value(x).len() {
            return Err(NumericsError::ShapeMismatch {
                op: "reshape",
                expected: shape,
                actual: self.shape(x).to_vec(),
            });
        }
        let out = self.value(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(shape, out, Op::Reshape(x), ng))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, NumericsError> {
        let (r, c) = self.matrix_dims("gather_rows", x)?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(NumericsError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                len: r,
            });
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        let ng = self.ng(x);
        Ok(self.push(vec![rows.len(), c], out, Op::GatherRows(x, rows.to_vec()), ng))
    }

    /// Flat gather: `out[i] = x.flat[indices[i]]`, shape `[indices.len()]`.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var, NumericsError> {
        let v = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v.len()) {
            return Err(NumericsError::IndexOutOfRange {
                op: "gather",
                index: bad,
                len: v.len(),
            });
        }
        let out = indices.iter().map(|&i| v[i]).collect();
        let ng = self.ng(x);
        Ok(self.push(vec![indices.len()], out, Op::Gather(x, indices.to_vec()), ng))
    }

    pub fn where_mask(&mut self, x: Var, keep: &[bool], fill: T) -> Result<Var, NumericsError> {
        let v = self.value(x);
        if keep.len() != v.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "where_mask",
                expected: self.shape(x).to_vec(),
                actual: vec![keep.len()],
            });
        }
        let out = v
            .iter()
            .zip(keep)
            .map(|(&t, &k)| if k { t } else { fill })
            .collect();
        let (shape, ng) = (self.shape(x).to_vec(), self.ng(x));
        Ok(self.push(shape, out, Op::WhereMask(x, keep.to_vec()), ng))
    }

    pub fn pad2d(
        &mut self,
        x: Var,
        rows: usize,
        cols: usize,
        row_offset: usize,
        col_offset: usize,
    ) -> Result<Var, NumericsError> {
        let (r, c) = self.matrix_dims("pad2d", x)?;
        if row_offset + r > rows || col_offset + c > cols {
            return Err(NumericsError::ShapeMismatch {
                op: "pad2d",
                expected: vec![rows, cols],
                actual: vec![row_offset + r, col_offset + c],
            });
        }
        let v = self.value(x);
        let mut out = vec![T::zero(); rows * cols];
        for i in 0..r {
            let dst = (row_offset + i) * cols + col_offset;
            out[dst..dst + c].copy_from_slice(&v[i * c..(i + 1) * c]);
        }
        let ng = self.ng(x);
        Ok(self.push(vec![rows, cols], out, Op::Pad2d(x, row_offset, col_offset), ng))
    }

    pub fn grouped_outer(&mut self, a: Var, b: Var, groups: usize) -> Result<Var, NumericsError> {
        let (p, d) = self.matrix_dims("grouped_outer", a)?;
        let sb = self.shape(b).to_vec();
        if sb != [p, d] {
            return Err(NumericsError::ShapeMismatch {
                op: "grouped_outer",
                expected: vec![p, d],
                actual: sb,
            });
        }
        if groups == 0 || d % groups != 0 {
            return Err(NumericsError::Indivisible {
                op: "grouped_outer",
                dim: d,
                groups,
            });
        }
        let k = d / groups;
        let width = groups * k * k;
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = vec![T::zero(); p * width];
        for r in 0..p {
            for g in 0..groups {
                for i in 0..k {
                    let av = va[r * d + g * k + i];
                    let dst = r * width + g * k * k + i * k;
                    let src = &vb[r * d + g * k..r * d + (g + 1) * k];
                    for (o, &bv) in out[dst..dst + k].iter_mut().zip(src) {
                        *o = av * bv;
                    }
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![p, width], out, Op::GroupedOuter(a, b, groups), ng))
    }

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(NumericsError::NonScalarLoss {
                shape: root.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if root.needs_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.ng(*a) {
                    let vb = self.value(*b);
                    let ga = acc_grad(grads, *a, m * k);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &vb[p * n..(p + 1) * n];
                            let mut s = T::zero();
                            for (&x, &y) in grow.iter().zip(brow) {
                                s += x * y;
                            }
                            ga[i * k + p] += s;
                        }
                    }
                }
                if self.ng(*b) {
                    let va = self.value(*a);
                    let gb = acc_grad(grads, *b, k * n);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = va[i * k + p];
                            for (o, &x) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += av * x;
                            }
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                if self.ng(*x) {
                    let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let gx = acc_grad(grads, *x, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Binary(kind, a, b) => self.propagate_binary(*kind, *a, *b, node, g, grads),
            Op::Scale(x, c) => {
                if self.ng(*x) {
                    let gx = acc_grad(grads, *x, g.len());
                    for (o, &t) in gx.iter_mut().zip(g) {
                        *o += t * *c;
                    }
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if self.ng(*x) {
                    let gx = acc_grad(grads, *x, g.len());
                    for (o, &t) in gx.iter_mut().zip(g) {
                        *o += t;
                    }
                }
            }
            Op::Unary(kind, x) => {
                if self.ng(*x) {
                    let xv = self.value(*x);
                    let y = &node.value;
                    let gx = acc_grad(grads, *x, g.len());
                    for i in 0..g.len() {
                        let d = match kind {
                            UnaryKind::Relu => {
                                if xv[i] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryKind::Tanh => T::one() - y[i] * y[i],
                            UnaryKind::Sigmoid => y[i] * (T::one() - y[i]),
                            UnaryKind::Exp => y[i],
                            UnaryKind::Log => T::one() / xv[i],
                        };
                        gx[i] += g[i] * d;
                    }
                }
            }
            Op::Map(x, deriv) => {
                if self.ng(*x) {
                    let gx = acc_grad(grads, *x, g.len());
                    for i in 0..g.len() {
                        gx[i] += g[i] * deriv[i];
                    }
                }
            }
            Op::Softmax(x, axis) => {
                if self.ng(*x) {
                    let (outer, n, inner) = split_axis("softmax", &node.shape, *axis).expect("checked");
                    let y = &node.value;
                    let gx = acc_grad(grads, *x, y.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + i;
                            let dot: T = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..n {
                                gx[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSumExp(x, axis) => {
                if self.ng(*x) {
                    let xs = self.shape(*x);
                    let (outer, n, inner) = split_axis("logsumexp", xs, *axis).expect("checked");
                    let xv = self.value(*x);
                    let out = &node.value;
                    let gx = acc_grad(grads, *x, xv.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let r = o * inner + i;
                            if out[r].is_infinite() {
                                continue;
                            }
                            for k in 0..n {
                                let at = (o * n + k) * inner + i;
                                gx[at] += g[r] * (xv[at] - out[r]).exp();
                            }
                        }
                    }
                }
            }
            Op::Sum(x, axis) | Op::Mean(x, axis) => {
                if self.ng(*x) {
                    let xs = self.shape(*x);
                    let (outer, n, inner) = split_axis("sum", xs, *axis).expect("checked");
                    let w = if matches!(node.op, Op::Mean(..)) {
                        T::one() / T::from_usize_lossy(n)
                    } else {
                        T::one()
                    };
                    let gx = acc_grad(grads, *x, outer * n * inner);
                    for o in 0..outer {
                        for k in 0..n {
                            for i in 0..inner {
                                gx[(o * n + k) * inner + i] += g[o * inner + i] * w;
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if self.ng(*x) {
                    let gx = acc_grad(grads, *x, len(*x));
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::LayerNorm(x, inv_std) => {
                if self.ng(*x) {
                    let y = &node.value;
                    let n = *node.shape.last().expect("rank >= 1");
                    let nt = T::from_usize_lossy(n);
                    let gx = acc_grad(grads, *x, y.len());
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let yr = &y[r * n..(r + 1) * n];
                        let mg = gr.iter().copied().sum::<T>() / nt;
                        let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / nt;
                        for j in 0..n {
                            gx[r * n + j] += is * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                }
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = split_axis("concat", &node.shape, *axis).expect("checked");
                let mut offset = 0;
                for &x in xs {
                    let n = self.shape(x)[*axis];
                    if self.ng(x) {
                        let gx = acc_grad(grads, x, outer * n * inner);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            for (d, &t) in gx[o * n * inner..(o + 1) * n * inner]
                                .iter_mut()
                                .zip(&g[src..src + n * inner])
                            {
                                *d += t;
                            }
                        }
                    }
                    offset += n;
                }
            }
            Op::Slice(x, axis, start) => {
                if self.ng(*x) {
                    let xs = self.shape(*x);
                    let (outer, n, inner) = split_axis("slice", xs, *axis).expect("checked");
                    let w = node.shape[*axis];
                    let gx = acc_grad(grads, *x, outer * n * inner);
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        for (d, &t) in gx[dst..dst + w * inner]
                            .iter_mut()
                            .zip(&g[o * w * inner..(o + 1) * w * inner])
                        {
                            *d += t;
                        }
                    }
                }
            }
            Op::GatherRows(x, rows) => {
                if self.ng(*x) {
                    let c = self.shape(*x)[1];
                    let gx = acc_grad(grads, *x, len(*x));
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            gx[r * c + j] += g[k * c + j];
                        }
                    }
                }
            }
            Op::Gather(x, idx) => {
                if self.ng(*x) {
                    let gx = acc_grad(grads, *x, len(*x));
                    for (k, &i) in idx.iter().enumerate() {
                        gx[i] += g[k];
                    }
                }
            }
            Op::WhereMask(x, keep) => {
                if self.ng(*x) {
                    let gx = acc_grad(grads, *x, g.len());
                    for i in 0..g.len() {
                        if keep[i] {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Pad2d(x, ro, co) => {
                if self.ng(*x) {
                    let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let cols = node.shape[1];
                    let gx = acc_grad(grads, *x, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[(ro + i) * cols + co + j];
                        }
                    }
                }
            }
            Op::GroupedOuter(a, b, groups) => {
                let (p, d) = (self.shape(*a)[0], self.shape(*a)[1]);
                let k = d / groups;
                let width = groups * k * k;
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let ga = acc_grad(grads, *a, p * d);
                    for r in 0..p {
                        for gi in 0..*groups {
                            for i in 0..k {
                                let src = r * width + gi * k * k + i * k;
                                let bs = &vb[r * d + gi * k..r * d + (gi + 1) * k];
                                let s: T = g[src..src + k].iter().zip(bs).map(|(&x, &y)| x * y).sum();
                                ga[r * d + gi * k + i] += s;
                            }
                        }
                    }
                }
                if self.ng(*b) {
                    let gb = acc_grad(grads, *b, p * d);
                    for r in 0..p {
                        for gi in 0..*groups {
                            for i in 0..k {
                                let av = va[r * d + gi * k + i];
                                let src = r * width + gi * k * k + i * k;
                                for j in 0..k {
                                    gb[r * d + gi * k + j] += av * g[src + j];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn propagate_binary(
        &self,
        kind: BinaryKind,
        a: Var,
        b: Var,
        node: &Node<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (da, db) = (|_ia: usize, ib: usize| match kind {
            BinaryKind::Add | BinaryKind::Sub => T::one(),
            BinaryKind::Mul => vb[ib],
            BinaryKind::Div => T::one() / vb[ib],
        }, |ia: usize, ib: usize| match kind {
            BinaryKind::Add => T::one(),
            BinaryKind::Sub => -T::one(),
            BinaryKind::Mul => va[ia],
            BinaryKind::Div => -va[ia] / (vb[ib] * vb[ib]),
        });
        let same = sa == sb;
        let (ta, tb) = if same {
            (Vec::new(), Vec::new())
        } else {
            (
                broadcast_strides(sa, &node.shape),
                broadcast_strides(sb, &node.shape),
            )
        };
        if self.ng(a) {
            let ga = acc_grad(grads, a, va.len());
            if same {
                for i in 0..g.len() {
                    ga[i] += g[i] * da(i, i);
                }
            } else {
                for_each_broadcast(&node.shape, &ta, &tb, |o, ia, ib| ga[ia] += g[o] * da(ia, ib));
            }
        }
        if self.ng(b) {
            let gb = acc_grad(grads, b, vb.len());
            if same {
                for i in 0..g.len() {
                    gb[i] += g[i] * db(i, i);
                }
            } else {
                for_each_broadcast(&node.shape, &ta, &tb, |o, ia, ib| gb[ib] += g[o] * db(ia, ib));
            }
        }
    }
}
