//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every primitive in creation order. Each recorded node
//! keeps its forward value and enough context to push an upstream gradient to
//! its parents. [`Tape::backward`] walks the nodes in reverse creation order
//! exactly once, accumulating gradients across fan-out.
//!
//! ```
//! use ndarray::arr1;
//! use phaseseg_core::tape::Tape;
//!
//! let mut tape = Tape::new();
//! let x = tape.var(arr1(&[3.0]).into_dyn());
//! let sq = tape.mul(x, x).unwrap();
//! let root = tape.sum(sq);
//! let grads = tape.backward(root).unwrap();
//! assert_eq!(grads.wrt(x)[[0]], 6.0);
//! ```

mod check;
mod optim;
mod params;

pub use check::{grad_check, grad_check_with};
pub use optim::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use params::{
    BoundParams, Checkpoint, OptimizerRecord, ParamRecord, ParamStore, CHECKPOINT_VERSION,
};

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, ArrayD, ArrayView2, Axis, Ix2, Ix3, IxDyn, Slice, Zip};
use thiserror::Error;

/// Dense real array of arbitrary rank, row-major.
pub type Tensor = ArrayD<f64>;

/// Floor applied before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("zero-norm row {row} in {op}")]
    ZeroNorm { op: &'static str, row: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

fn shape_err(op: &'static str, detail: impl Into<String>) -> TapeError {
    TapeError::Shape {
        op,
        detail: detail.into(),
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

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    MulBroadcast(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Tensor,
        inv_std: Tensor,
    },
    Ln(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    NormalizeRows {
        x: Var,
        norms: Tensor,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of nodes in creation (topological) order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every trainable leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zeros when the root does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(IxDyn(&self.shapes[v.0])),
        }
    }
}

pub(crate) fn reshape_owned(t: Tensor, shape: &[usize]) -> Tensor {
    let t = if t.is_standard_layout() {
        t
    } else {
        t.as_standard_layout().into_owned()
    };
    t.into_shape_with_order(IxDyn(shape))
        .expect("element count checked by caller")
}

fn as2(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("rank checked")
}

fn matmul2(a: ArrayView2<f64>, b: ArrayView2<f64>) -> ndarray::Array2<f64> {
    a.dot(&b)
}

fn batch_matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let a3 = a.view().into_dimensionality::<Ix3>().expect("rank checked");
    let b3 = b.view().into_dimensionality::<Ix3>().expect("rank checked");
    let n = a3.shape()[0];
    let (m, _) = if ta {
        (a3.shape()[2], a3.shape()[1])
    } else {
        (a3.shape()[1], a3.shape()[2])
    };
    let p = if tb { b3.shape()[1] } else { b3.shape()[2] };
    let mut out = ndarray::Array3::<f64>::zeros((n, m, p));
    for i in 0..n {
        let ai = a3.index_axis(Axis(0), i);
        let bi = b3.index_axis(Axis(0), i);
        let ai = if ta { ai.reversed_axes() } else { ai };
        let bi = if tb { bi.reversed_axes() } else { bi };
        general_mat_mul(1.0, &ai, &bi, 0.0, &mut out.index_axis_mut(Axis(0), i));
    }
    out.into_dyn()
}

/// Sum `g` over its leading axes so it takes `suffix` shape.
fn reduce_to_suffix(g: &Tensor, suffix: &[usize]) -> Tensor {
    let inner: usize = suffix.iter().product();
    let lead = g.len() / inner.max(1);
    let flat = reshape_owned(g.clone(), &[lead, inner]);
    reshape_owned(flat.sum_axis(Axis(0)).into_dyn(), suffix)
}

fn is_suffix(full: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= full.len() && full[full.len() - suffix.len()..] == *suffix
}

fn inverse_perm(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
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

    /// Scalar value of a rank-0 or single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = &self.nodes[v.0].value;
        t.iter().next().copied().unwrap_or(f64::NAN)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable leaf: gradients flow into it.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TapeError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.same_shape("add", a, b)?;
        let v = self.value(a) + self.value(b);
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a) - self.value(b);
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a) * self.value(b);
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (bias-style broadcast).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        if !is_suffix(self.shape(a), self.shape(b)) {
            return Err(shape_err(
                "add_broadcast",
                format!("{:?} is not a suffix of {:?}", self.shape(b), self.shape(a)),
            ));
        }
        let v = self.value(a) + self.value(b);
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::AddBroadcast(a, b), ng))
    }

    /// `a * b` where `b`'s shape is a suffix of `a`'s.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        if !is_suffix(self.shape(a), self.shape(b)) {
            return Err(shape_err(
                "mul_broadcast",
                format!("{:?} is not a suffix of {:?}", self.shape(b), self.shape(a)),
            ));
        }
        let v = self.value(a) * self.value(b);
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::MulBroadcast(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let ng = self.ng(&[a]);
        self.push(v, Op::Scale(a, c), ng)
    }

    /// Matrix product of two rank-2 nodes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let v = matmul2(as2(self.value(a)), as2(self.value(b))).into_dyn();
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    /// Batched matrix product of two rank-3 nodes sharing the leading axis.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("batch_matmul", format!("{sa:?} x {sb:?}")));
        }
        let v = batch_matmul(self.value(a), self.value(b), false, false);
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::BatchMatMul(a, b), ng))
    }

    /// Transpose of a rank-2 node.
    pub fn transpose(&mut self, a: Var) -> Result<Var, TapeError> {
        if self.shape(a).len() != 2 {
            return Err(shape_err("transpose", format!("rank {}", self.shape(a).len())));
        }
        let v = self.value(a).t().as_standard_layout().into_owned();
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::Transpose(a), ng))
    }

    /// General axis permutation.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var, TapeError> {
        let rank = self.shape(a).len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&x| x >= rank || std::mem::replace(&mut seen[x], true)) {
            return Err(shape_err("permute", format!("axes {axes:?} for rank {rank}")));
        }
        let v = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::Permute(a, axes.to_vec()), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TapeError> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        let v = reshape_owned(self.value(a).clone(), shape);
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::Reshape(a), ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TapeError> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs"));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} for rank {}", first.len())));
        }
        for p in parts {
            let s = self.shape(*p);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(shape_err("concat", format!("{first:?} vs {s:?}")));
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(axis), &views).map_err(|e| shape_err("concat", e.to_string()))?;
        let ng = self.ng(parts);
        Ok(self.push(v, Op::Concat(parts.to_vec(), axis), ng))
    }

    /// Half-open slice `[start, end)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var, TapeError> {
        let s = self.shape(a);
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(shape_err("slice", format!("[{start},{end}) on axis {axis} of {s:?}")));
        }
        let v = self
            .value(a)
            .slice_axis(Axis(axis), Slice::from(start..end))
            .to_owned();
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::Slice { x: a, axis, start }, ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(&[a]);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.ng(&[a]);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let ng = self.ng(&[a]);
        self.push(v, Op::Tanh(a), ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TapeError> {
        let x = self.value(a);
        if x.ndim() == 0 {
            return Err(shape_err("softmax", "rank 0"));
        }
        let mut v = x.clone();
        let last = Axis(v.ndim() - 1);
        for mut lane in v.lanes_mut(last) {
            let m = lane.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            lane.mapv_inplace(|x| (x - m).exp());
            let s = lane.sum();
            lane.mapv_inplace(|x| x / s);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::Softmax(a), ng))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TapeError> {
        let s = self.shape(x).to_vec();
        let c = *s.last().ok_or_else(|| shape_err("layer_norm", "rank 0"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                "layer_norm",
                format!("affine {:?}/{:?} for {s:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let rows = self.value(x).len() / c;
        let flat = reshape_owned(self.value(x).clone(), &[rows, c])
            .into_dimensionality::<ndarray::Ix2>()
            .expect("rank 2");
        let mut normed = ndarray::Array2::<f64>::zeros((rows, c));
        let mut inv_std = ndarray::Array1::<f64>::zeros(rows);
        for r in 0..rows {
            let row = flat.row(r);
            let mu = row.sum() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for k in 0..c {
                normed[[r, k]] = (row[k] - mu) * inv;
            }
        }
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut out = normed.clone().into_dyn();
        out = out * g + b;
        let v = reshape_owned(out, &s);
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed: normed.into_dyn(),
                inv_std: inv_std.into_dyn(),
            },
            ng,
        ))
    }

    /// Natural log with inputs clamped below at [`LOG_FLOOR`].
    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(LOG_FLOOR).ln());
        let ng = self.ng(&[a]);
        self.push(v, Op::Ln(a), ng)
    }

    /// Sum of all elements, as a rank-0 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = ndarray::arr0(self.value(a).sum()).into_dyn();
        let ng = self.ng(&[a]);
        self.push(v, Op::Sum(a), ng)
    }

    /// Mean of all elements, as a rank-0 node.
    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = ndarray::arr0(x.sum() / x.len().max(1) as f64).into_dyn();
        let ng = self.ng(&[a]);
        self.push(v, Op::Mean(a), ng)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, TapeError> {
        if axis >= self.shape(a).len() {
            return Err(shape_err("sum_axis", format!("axis {axis} of {:?}", self.shape(a))));
        }
        let v = self.value(a).sum_axis(Axis(axis));
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::SumAxis(a, axis), ng))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, TapeError> {
        let s = self.shape(a);
        if axis >= s.len() || s[axis] == 0 {
            return Err(shape_err("mean_axis", format!("axis {axis} of {s:?}")));
        }
        let n = s[axis] as f64;
        let v = self.value(a).sum_axis(Axis(axis)) / n;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::MeanAxis(a, axis), ng))
    }

    /// Scale every lane along the last axis to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var, TapeError> {
        let x = self.value(a);
        if x.ndim() == 0 {
            return Err(shape_err("normalize_rows", "rank 0"));
        }
        let last = Axis(x.ndim() - 1);
        let mut v = x.clone();
        let mut norms = Vec::new();
        for (row, mut lane) in v.lanes_mut(last).into_iter().enumerate() {
            let n = lane.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n <= 0.0 || !n.is_finite() {
                return Err(TapeError::ZeroNorm {
                    op: "normalize_rows",
                    row,
                });
            }
            lane.mapv_inplace(|x| x / n);
            norms.push(n);
        }
        let norms = ndarray::Array1::from(norms).into_dyn();
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::NormalizeRows { x: a, norms }, ng))
    }

    /// Gradients of scalar `root` with respect to every trainable leaf.
    pub fn backward(&self, root: Var) -> Result<Gradients, TapeError> {
        let rv = &self.nodes[root.0].value;
        if rv.len() != 1 {
            return Err(TapeError::NonScalarRoot(rv.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[root.0] = Some(Tensor::ones(rv.raw_dim()));
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; n];

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let mut acc = |v: Var, d: Tensor| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &d,
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {
                    leaf_grads[i] = Some(g);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, -&g);
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, &g * self.value(*b));
                    acc(*b, &g * self.value(*a));
                }
                Op::AddBroadcast(a, b) => {
                    let bs = self.shape(*b).to_vec();
                    acc(*b, reduce_to_suffix(&g, &bs));
                    acc(*a, g);
                }
                Op::MulBroadcast(a, b) => {
                    let bs = self.shape(*b).to_vec();
                    let gb = &g * self.value(*a);
                    acc(*b, reduce_to_suffix(&gb, &bs));
                    acc(*a, &g * self.value(*b));
                }
                Op::Scale(a, c) => acc(*a, g * *c),
                Op::MatMul(a, b) => {
                    let g2 = as2(&g);
                    let da = matmul2(g2, as2(self.value(*b)).t());
                    let db = matmul2(as2(self.value(*a)).t(), g2);
                    acc(*a, da.into_dyn());
                    acc(*b, db.into_dyn());
                }
                Op::BatchMatMul(a, b) => {
                    let da = batch_matmul(&g, self.value(*b), false, true);
                    let db = batch_matmul(self.value(*a), &g, true, false);
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::Transpose(a) => acc(*a, g.t().as_standard_layout().into_owned()),
                Op::Permute(a, axes) => {
                    let inv = inverse_perm(axes);
                    acc(
                        *a,
                        g.view()
                            .permuted_axes(IxDyn(&inv))
                            .as_standard_layout()
                            .into_owned(),
                    );
                }
                Op::Reshape(a) => {
                    let s = self.shape(*a).to_vec();
                    acc(*a, reshape_owned(g, &s));
                }
                Op::Concat(parts, axis) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.shape(*p)[*axis];
                        let piece = g
                            .slice_axis(Axis(*axis), Slice::from(offset..offset + len))
                            .to_owned();
                        acc(*p, piece);
                        offset += len;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let mut full = Tensor::zeros(self.value(*x).raw_dim());
                    let len = g.shape()[*axis];
                    full.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + len))
                        .assign(&g);
                    acc(*x, full);
                }
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| {
                            if x <= 0.0 {
                                *d = 0.0
                            }
                        });
                    acc(*a, d);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let mut d = g;
                    Zip::from(&mut d).and(y).for_each(|d, &y| *d *= y * (1.0 - y));
                    acc(*a, d);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let mut d = g;
                    Zip::from(&mut d).and(y).for_each(|d, &y| *d *= 1.0 - y * y);
                    acc(*a, d);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let last = Axis(y.ndim() - 1);
                    let mut d = &g * y;
                    for (mut dl, yl) in d.lanes_mut(last).into_iter().zip(y.lanes(last)) {
                        let s = dl.sum();
                        Zip::from(&mut dl).and(&yl).for_each(|d, &y| *d -= y * s);
                    }
                    acc(*a, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    normed,
                    inv_std,
                } => {
                    let c = self.shape(*gamma)[0];
                    let rows = g.len() / c;
                    let g2 = reshape_owned(g, &[rows, c]);
                    let xhat = as2(normed);
                    acc(*beta, g2.sum_axis(Axis(0)).into_dyn());
                    acc(*gamma, (&g2 * &xhat).sum_axis(Axis(0)).into_dyn());
                    if self.nodes[x.0].needs_grad {
                        let gam = self.value(*gamma);
                        let mut dx = ndarray::Array2::<f64>::zeros((rows, c));
                        let cf = c as f64;
                        for r in 0..rows {
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for k in 0..c {
                                let dh = g2[[r, k]] * gam[k];
                                s1 += dh;
                                s2 += dh * xhat[[r, k]];
                            }
                            let inv = inv_std[r];
                            for k in 0..c {
                                let dh = g2[[r, k]] * gam[k];
                                dx[[r, k]] = inv / cf * (cf * dh - s1 - xhat[[r, k]] * s2);
                            }
                        }
                        let s = self.shape(*x).to_vec();
                        acc(*x, reshape_owned(dx.into_dyn(), &s));
                    }
                }
                Op::Ln(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                        *d = if x > LOG_FLOOR { *d / x } else { 0.0 };
                    });
                    acc(*a, d);
                }
                Op::Sum(a) => {
                    let s = g.iter().next().copied().unwrap_or(0.0);
                    acc(*a, Tensor::from_elem(self.value(*a).raw_dim(), s));
                }
                Op::Mean(a) => {
                    let x = self.value(*a);
                    let s = g.iter().next().copied().unwrap_or(0.0) / x.len().max(1) as f64;
                    acc(*a, Tensor::from_elem(x.raw_dim(), s));
                }
                Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                    let x = self.value(*a);
                    let scale = match node.op {
                        Op::MeanAxis(..) => 1.0 / x.shape()[*axis] as f64,
                        _ => 1.0,
                    };
                    let expanded = g.insert_axis(Axis(*axis));
                    let d = expanded
                        .broadcast(x.raw_dim())
                        .expect("reduced axis re-broadcasts")
                        .to_owned()
                        * scale;
                    acc(*a, d);
                }
                Op::NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let last = Axis(y.ndim() - 1);
                    let mut d = g;
                    for ((mut dl, yl), &n) in d
                        .lanes_mut(last)
                        .into_iter()
                        .zip(y.lanes(last))
                        .zip(norms.iter())
                    {
                        let dot: f64 = dl.iter().zip(yl.iter()).map(|(a, b)| a * b).sum();
                        Zip::from(&mut dl)
                            .and(&yl)
                            .for_each(|d, &y| *d = (*d - y * dot) / n);
                    }
                    acc(*x, d);
                }
            }
        }
        Ok(Gradients {
            grads: leaf_grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    #[test]
    fn add_is_elementwise() {
        let mut t = Tape::new();
        let a = t.var(arr1(&[1.0, 2.0]).into_dyn());
        let b = t.var(arr1(&[10.0, 20.0]).into_dyn());
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c), &arr1(&[11.0, 22.0]).into_dyn());
    }

    #[test]
    fn matmul_shape_contract() {
        let mut t = Tape::new();
        let a = t.var(Tensor::ones(IxDyn(&[2, 3])));
        let b = t.var(Tensor::ones(IxDyn(&[3, 4])));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(c), &[2, 4]);
        assert!(t.value(c).iter().all(|&x| x == 3.0));
        assert!(matches!(t.matmul(b, a), Err(TapeError::Shape { .. })));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let a = t.var(Tensor::zeros(IxDyn(&[3])));
        let s = t.softmax(a).unwrap();
        for &p in t.value(s) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn quadratic_gradient() {
        let mut t = Tape::new();
        let x = t.var(arr1(&[3.0]).into_dyn());
        let sq = t.mul(x, x).unwrap();
        let root = t.sum(sq);
        assert_eq!(t.backward(root).unwrap().wrt(x)[[0]], 6.0);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let x = t.var(arr2(&[[1.0, -2.0], [0.5, 7.0]]).into_dyn());
        let root = t.sum(x);
        let g = t.backward(root).unwrap().wrt(x);
        assert!(g.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let x = t.var(Tensor::ones(IxDyn(&[2])));
        assert!(matches!(t.backward(x), Err(TapeError::NonScalarRoot(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let x = t.var(arr1(&[1.0, 2.0]).into_dyn());
        let c = t.constant(arr1(&[5.0, 5.0]).into_dyn());
        let p = t.mul(x, c).unwrap();
        let root = t.sum(p);
        let g = t.backward(root).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(x), arr1(&[5.0, 5.0]).into_dyn());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = (x*x) used twice vs written out twice: same gradient.
        let x0 = arr1(&[1.5, -0.5]).into_dyn();
        let mut t = Tape::new();
        let x = t.var(x0.clone());
        let s = t.mul(x, x).unwrap();
        let y = t.add(s, s).unwrap();
        let r = t.sum(y);
        let shared = t.backward(r).unwrap().wrt(x);

        let mut t2 = Tape::new();
        let x2 = t2.var(x0);
        let s1 = t2.mul(x2, x2).unwrap();
        let s2 = t2.mul(x2, x2).unwrap();
        let y2 = t2.add(s1, s2).unwrap();
        let r2 = t2.sum(y2);
        let expanded = t2.backward(r2).unwrap().wrt(x2);
        assert_eq!(shared, expanded);
    }

    #[test]
    fn ln_clamps_at_floor() {
        let mut t = Tape::new();
        let x = t.var(arr1(&[0.0, 1.0]).into_dyn());
        let l = t.ln(x);
        assert!((t.value(l)[[0]] - LOG_FLOOR.ln()).abs() < 1e-12);
        assert_eq!(t.value(l)[[1]], 0.0);
    }

    #[test]
    fn normalize_rows_rejects_zero() {
        let mut t = Tape::new();
        let x = t.var(arr2(&[[1.0, 0.0], [0.0, 0.0]]).into_dyn());
        assert_eq!(
            t.normalize_rows(x).unwrap_err(),
            TapeError::ZeroNorm {
                op: "normalize_rows",
                row: 1
            }
        );
    }
}
