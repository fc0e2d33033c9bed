//! Tape-based reverse-mode differentiation over a closed set of matrix ops.
//!
//! Every op records its inputs (and whatever forward state its backward
//! needs) when it is applied; [`Graph::backward`] walks the tape in reverse.
//! Adding an op means adding both halves here.

use std::sync::Arc;

use rayon::prelude::*;

use super::matrix::{dot, softmax_in_place, Matrix, KL_Q_FLOOR};
use super::scalar::{s, Scalar};
use super::NumericsError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, T),
    /// Matrix times a 1×1 node.
    MulScalar(NodeId, NodeId),
    Exp(NodeId),
    RowSoftmax(NodeId, T),
    RowLogSoftmax(NodeId, T),
    Log(NodeId),
    Mul(NodeId, NodeId),
    L2NormalizeRows(NodeId, Vec<T>),
    Sum(NodeId),
    Mean(NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    GatherRows(NodeId, Arc<Vec<usize>>),
    DepthwiseConv {
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        seq_len: usize,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Matrix<T>,
        inv_std: Vec<T>,
        mean: Vec<T>,
        var: Vec<T>,
    },
    LayerNorm {
        x: NodeId,
        xhat: Matrix<T>,
        inv_std: Vec<T>,
    },
    Gelu(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        seq_len: usize,
        probs: Vec<T>,
    },
}

struct Node<T> {
    op: Op<T>,
    value: Matrix<T>,
    requires_grad: bool,
    trainable: bool,
}

/// Recorded computation; owns every intermediate value.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to the trainable leaves.
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Matrix<T>>>,
    /// Trainable leaves the loss does not depend on; their gradient is zero.
    pub disconnected: Vec<NodeId>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Matrix<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Matrix<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` via a single `exp`; saturates cleanly at ±1.
#[inline]
fn tanh_exp<T: Scalar>(u: T) -> T {
    let two = s::<T>(2.0);
    two / (T::one() + (-two * u).exp()) - T::one()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records no backward state; for inference.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Matrix<T>, inputs: &[NodeId]) -> NodeId {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        // Inference graphs keep values only; drop per-op saved state.
        let op = if self.grad_enabled { op } else { strip(op) };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            trainable: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix<T>) -> NodeId {
        let trainable = self.grad_enabled;
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: trainable,
            trainable,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix<T>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: false,
            trainable: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> Option<T> {
        self.value(id).item()
    }

    pub fn take_value(&mut self, id: NodeId) -> Matrix<T> {
        std::mem::replace(&mut self.nodes[id.0].value, Matrix::zeros(0, 0))
    }

    /// Per-channel batch mean and biased variance recorded by a batch-norm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[T], &[T])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v, &[a, b]))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v, &[a])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v, &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, k: T) -> NodeId {
        let v = self.value(a).scale(k);
        self.push(Op::Scale(a, k), v, &[a])
    }

    pub fn mul_scalar(&mut self, a: NodeId, scalar: NodeId) -> Result<NodeId, NumericsError> {
        let k = self
            .value(scalar)
            .item()
            .ok_or(NumericsError::ShapeMismatch {
                op: "mul_scalar",
                left: self.value(a).shape(),
                right: self.value(scalar).shape(),
            })?;
        let v = self.value(a).scale(k);
        Ok(self.push(Op::MulScalar(a, scalar), v, &[a, scalar]))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(T::exp);
        self.push(Op::Exp(a), v, &[a])
    }

    pub fn row_softmax(&mut self, a: NodeId, temp: T) -> Result<NodeId, NumericsError> {
        let v = self.value(a).row_softmax(temp)?;
        Ok(self.push(Op::RowSoftmax(a, temp), v, &[a]))
    }

    /// `log(row_softmax(a, temp))` without underflow in the log.
    pub fn row_log_softmax(&mut self, a: NodeId, temp: T) -> Result<NodeId, NumericsError> {
        if !(temp > T::zero()) {
            return Err(NumericsError::NonPositiveTemperature(temp.to_f64()));
        }
        let mut v = self.value(a).clone();
        let cols = v.cols().max(1);
        for row in v.data_mut().chunks_mut(cols) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row
                .iter()
                .map(|&x| ((x - max) / temp).exp())
                .sum::<T>()
                .ln();
            for x in row.iter_mut() {
                *x = (*x - max) / temp - lse;
            }
        }
        Ok(self.push(Op::RowLogSoftmax(a, temp), v, &[a]))
    }

    /// Natural log, with inputs floored at the KL clamp.
    pub fn log(&mut self, a: NodeId) -> NodeId {
        let floor = s::<T>(KL_Q_FLOOR);
        let v = self.value(a).map(|x| x.max(floor).ln());
        self.push(Op::Log(a), v, &[a])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v, &[a, b]))
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let x = self.value(a);
        let mut norms = Vec::with_capacity(x.rows());
        for (r, row) in x.iter_rows().enumerate() {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n == T::zero() || !n.is_finite() {
                return Err(NumericsError::ZeroRow { row: r });
            }
            norms.push(n);
        }
        let mut v = x.clone();
        for (r, &n) in norms.iter().enumerate() {
            for e in v.row_mut(r) {
                *e = *e / n;
            }
        }
        Ok(self.push(Op::L2NormalizeRows(a, norms), v, &[a]))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let v = Matrix::scalar(x.sum() / s(x.len().max(1) as f64));
        self.push(Op::Mean(a), v, &[a])
    }

    /// Adds a 1×C row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, NumericsError> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(NumericsError::ShapeMismatch {
                op: "add_row",
                left: x.shape(),
                right: b.shape(),
            });
        }
        let mut v = x.clone();
        let cols = v.cols().max(1);
        for row in v.data_mut().chunks_mut(cols) {
            for (e, &bb) in row.iter_mut().zip(b.data()) {
                *e = *e + bb;
            }
        }
        Ok(self.push(Op::AddRow(a, bias), v, &[a, bias]))
    }

    /// Multiplies every row of `a` elementwise by a 1×C row.
    pub fn mul_row(&mut self, a: NodeId, gain: NodeId) -> Result<NodeId, NumericsError> {
        let (x, g) = (self.value(a), self.value(gain));
        if g.rows() != 1 || g.cols() != x.cols() {
            return Err(NumericsError::ShapeMismatch {
                op: "mul_row",
                left: x.shape(),
                right: g.shape(),
            });
        }
        let mut v = x.clone();
        let cols = v.cols().max(1);
        for row in v.data_mut().chunks_mut(cols) {
            for (e, &gg) in row.iter_mut().zip(g.data()) {
                *e = *e * gg;
            }
        }
        Ok(self.push(Op::MulRow(a, gain), v, &[a, gain]))
    }

    /// Output row `i` is row `indices[i]` of `table`.
    pub fn gather_rows(
        &mut self,
        table: NodeId,
        indices: Arc<Vec<usize>>,
    ) -> Result<NodeId, NumericsError> {
        let t = self.value(table);
        let cols = t.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices.iter() {
            if i >= t.rows() {
                return Err(NumericsError::IndexOutOfRange {
                    index: i,
                    len: t.rows(),
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let v = Matrix::new(indices.len(), cols, data)?;
        Ok(self.push(Op::GatherRows(table, indices), v, &[table]))
    }

    /// Same-length depthwise 1-D convolution along the sequence axis.
    ///
    /// `x` holds `batch · seq_len` rows of C channels (sequence-major per
    /// sample); `weight` is C×k with odd k; positions outside a sequence read
    /// as zero.
    pub fn depthwise_conv(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        seq_len: usize,
    ) -> Result<NodeId, NumericsError> {
        let xv = self.value(x);
        let w = self.value(weight);
        if w.rows() != xv.cols() || w.cols() % 2 == 0 || seq_len == 0 || xv.rows() % seq_len != 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "depthwise_conv",
                left: xv.shape(),
                right: w.shape(),
            });
        }
        let b = match bias {
            Some(id) => {
                let b = self.value(id);
                if b.shape() != (1, xv.cols()) {
                    return Err(NumericsError::ShapeMismatch {
                        op: "depthwise_conv bias",
                        left: xv.shape(),
                        right: b.shape(),
                    });
                }
                Some(b.data())
            }
            None => None,
        };
        let v = depthwise_conv_forward(xv, w, b, seq_len);
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(
            Op::DepthwiseConv {
                x,
                weight,
                bias,
                seq_len,
            },
            v,
            &inputs,
        ))
    }

    /// Batch normalization over rows using the batch's own statistics.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
    ) -> Result<NodeId, NumericsError> {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.shape() != (1, c) || b.shape() != (1, c) || n == 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "batch_norm",
                left: xv.shape(),
                right: g.shape(),
            });
        }
        let nf = s::<T>(n as f64);
        let mut mean = vec![T::zero(); c];
        for row in xv.iter_rows() {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m = *m + v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / nf);
        let mut var = vec![T::zero(); c];
        for row in xv.iter_rows() {
            for ((acc, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *acc = *acc + (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|v| *v = *v / nf);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = xv.clone();
        for row in xhat.data_mut().chunks_mut(c.max(1)) {
            for ((e, &m), &is) in row.iter_mut().zip(&mean).zip(&inv_std) {
                *e = (*e - m) * is;
            }
        }
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            for ((e, &gg), &bb) in row.iter_mut().zip(g.data()).zip(b.data()) {
                *e = *e * gg + bb;
            }
        }
        Ok(self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mean,
                var,
            },
            out,
            &[x, gamma, beta],
        ))
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm(&mut self, x: NodeId, eps: T) -> NodeId {
        let xv = self.value(x);
        let c = xv.cols().max(1);
        let cf = s::<T>(c as f64);
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for row in xhat.data_mut().chunks_mut(c) {
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let is = T::one() / (var + eps).sqrt();
            for e in row.iter_mut() {
                *e = (*e - mean) * is;
            }
            inv_std.push(is);
        }
        let out = xhat.clone();
        self.push(Op::LayerNorm { x, xhat, inv_std }, out, &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let (c, k) = (s::<T>(GELU_C), s::<T>(GELU_A));
        let half = s::<T>(0.5);
        let v = self
            .value(a)
            .map(|x| half * x * (T::one() + tanh_exp(c * (x + k * x * x * x))));
        self.push(Op::Gelu(a), v, &[a])
    }

    /// Multi-head scaled dot-product attention within each sequence.
    ///
    /// `q`, `k`, `v` are `batch · seq_len` × C; heads split the channels.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        seq_len: usize,
        causal: bool,
    ) -> Result<NodeId, NumericsError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, c) = qv.shape();
        if kv.shape() != (n, c)
            || vv.shape() != (n, c)
            || heads == 0
            || c % heads != 0
            || seq_len == 0
            || n % seq_len != 0
        {
            return Err(NumericsError::ShapeMismatch {
                op: "attention",
                left: qv.shape(),
                right: kv.shape(),
            });
        }
        let (out, probs) = attention_forward(qv, kv, vv, heads, seq_len, causal);
        Ok(self.push(
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            },
            out,
            &[q, k, v],
        ))
    }

    /// Reverse pass from a 1×1 node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, NumericsError> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(NumericsError::NonScalarLoss {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }
        let mut disconnected = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.trainable {
                if grads[idx].is_none() {
                    log::warn!("trainable leaf {idx} does not reach the loss; gradient is zero");
                    disconnected.push(NodeId(idx));
                    grads[idx] = Some(Matrix::zeros(node.value.rows(), node.value.cols()));
                }
            } else {
                grads[idx] = None;
            }
        }
        Ok(Gradients {
            grads,
            disconnected,
        })
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        dy: &Matrix<T>,
        grads: &mut [Option<Matrix<T>>],
    ) -> Result<(), NumericsError> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, dy.matmul_nt(val(*b))?);
                }
                if needs(*b) {
                    accumulate(grads, *b, val(*a).matmul_tn(dy)?);
                }
            }
            Op::Transpose(a) => accumulate(grads, *a, dy.transpose()),
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if needs(*b) {
                    accumulate(grads, *b, dy.clone());
                }
            }
            Op::Scale(a, k) => accumulate(grads, *a, dy.scale(*k)),
            Op::MulScalar(a, sc) => {
                let k = val(*sc).data()[0];
                if needs(*a) {
                    accumulate(grads, *a, dy.scale(k));
                }
                if needs(*sc) {
                    let g = dy
                        .data()
                        .iter()
                        .zip(val(*a).data())
                        .map(|(&d, &x)| d * x)
                        .sum();
                    accumulate(grads, *sc, Matrix::scalar(g));
                }
            }
            Op::Exp(a) => accumulate(grads, *a, dy.hadamard(y)?),
            Op::RowSoftmax(a, temp) => {
                let mut dx = dy.clone();
                let cols = y.cols().max(1);
                for (drow, yrow) in dx.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)) {
                    let inner = dot(drow, yrow);
                    for (d, &p) in drow.iter_mut().zip(yrow) {
                        *d = p * (*d - inner) / *temp;
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::RowLogSoftmax(a, temp) => {
                let mut dx = dy.clone();
                let cols = y.cols().max(1);
                for (drow, yrow) in dx.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)) {
                    let total: T = drow.iter().copied().sum();
                    for (d, &lp) in drow.iter_mut().zip(yrow) {
                        *d = (*d - lp.exp() * total) / *temp;
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::Log(a) => {
                let floor = s::<T>(KL_Q_FLOOR);
                let dx = dy.zip_map(val(*a), |d, x| if x > floor { d / x } else { T::zero() })?;
                accumulate(grads, *a, dx);
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, dy.hadamard(val(*b))?);
                }
                if needs(*b) {
                    accumulate(grads, *b, dy.hadamard(val(*a))?);
                }
            }
            Op::L2NormalizeRows(a, norms) => {
                let mut dx = dy.clone();
                let cols = y.cols().max(1);
                for ((drow, yrow), &n) in dx
                    .data_mut()
                    .chunks_mut(cols)
                    .zip(y.data().chunks(cols))
                    .zip(norms)
                {
                    let inner = dot(drow, yrow);
                    for (d, &yy) in drow.iter_mut().zip(yrow) {
                        *d = (*d - yy * inner) / n;
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::Sum(a) => {
                let x = val(*a);
                accumulate(grads, *a, Matrix::filled(x.rows(), x.cols(), dy.data()[0]));
            }
            Op::Mean(a) => {
                let x = val(*a);
                let g = dy.data()[0] / s(x.len().max(1) as f64);
                accumulate(grads, *a, Matrix::filled(x.rows(), x.cols(), g));
            }
            Op::AddRow(a, bias) => {
                if needs(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if needs(*bias) {
                    accumulate(grads, *bias, column_sums(dy));
                }
            }
            Op::MulRow(a, gain) => {
                let g = val(*gain);
                if needs(*a) {
                    let mut dx = dy.clone();
                    let cols = dx.cols().max(1);
                    for row in dx.data_mut().chunks_mut(cols) {
                        for (e, &gg) in row.iter_mut().zip(g.data()) {
                            *e = *e * gg;
                        }
                    }
                    accumulate(grads, *a, dx);
                }
                if needs(*gain) {
                    accumulate(grads, *gain, column_sums(&dy.hadamard(val(*a))?));
                }
            }
            Op::GatherRows(table, indices) => {
                let t = val(*table);
                let mut dt = Matrix::zeros(t.rows(), t.cols());
                for (i, &src) in indices.iter().enumerate() {
                    for (e, &d) in dt.row_mut(src).iter_mut().zip(dy.row(i)) {
                        *e = *e + d;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::DepthwiseConv {
                x,
                weight,
                bias,
                seq_len,
            } => {
                let (dx, dw) = depthwise_conv_backward(val(*x), val(*weight), dy, *seq_len);
                if needs(*x) {
                    accumulate(grads, *x, dx);
                }
                if needs(*weight) {
                    accumulate(grads, *weight, dw);
                }
                if let Some(b) = bias {
                    if needs(*b) {
                        accumulate(grads, *b, column_sums(dy));
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                ..
            } => {
                let g = val(*gamma);
                let (n, c) = xhat.shape();
                let nf = s::<T>(n as f64);
                let mut sum_d = vec![T::zero(); c];
                let mut sum_dx = vec![T::zero(); c];
                for (drow, xrow) in dy.iter_rows().zip(xhat.iter_rows()) {
                    for j in 0..c {
                        sum_d[j] = sum_d[j] + drow[j];
                        sum_dx[j] = sum_dx[j] + drow[j] * xrow[j];
                    }
                }
                if needs(*gamma) {
                    accumulate(grads, *gamma, Matrix::new(1, c, sum_dx.clone())?);
                }
                if needs(*beta) {
                    accumulate(grads, *beta, Matrix::new(1, c, sum_d.clone())?);
                }
                if needs(*x) {
                    let mut dx = dy.clone();
                    for (drow, xrow) in dx
                        .data_mut()
                        .chunks_mut(c.max(1))
                        .zip(xhat.data().chunks(c.max(1)))
                    {
                        for j in 0..c {
                            let scale = g.data()[j] * inv_std[j] / nf;
                            drow[j] = scale * (nf * drow[j] - sum_d[j] - xrow[j] * sum_dx[j]);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let c = xhat.cols().max(1);
                let cf = s::<T>(c as f64);
                let mut dx = dy.clone();
                for ((drow, xrow), &is) in dx
                    .data_mut()
                    .chunks_mut(c)
                    .zip(xhat.data().chunks(c))
                    .zip(inv_std)
                {
                    let mean_d = drow.iter().copied().sum::<T>() / cf;
                    let mean_dx = dot(drow, xrow) / cf;
                    for (d, &xh) in drow.iter_mut().zip(xrow) {
                        *d = is * (*d - mean_d - xh * mean_dx);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Gelu(a) => {
                let (c, k) = (s::<T>(GELU_C), s::<T>(GELU_A));
                let half = s::<T>(0.5);
                let three = s::<T>(3.0);
                let dx = dy.zip_map(val(*a), |d, x| {
                    let t = tanh_exp(c * (x + k * x * x * x));
                    let dt = (T::one() - t * t) * c * (T::one() + three * k * x * x);
                    d * (half * (T::one() + t) + half * x * dt)
                })?;
                accumulate(grads, *a, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            } => {
                let (dq, dk, dv) =
                    attention_backward(val(*q), val(*k), val(*v), dy, probs, *heads, *seq_len);
                if needs(*q) {
                    accumulate(grads, *q, dq);
                }
                if needs(*k) {
                    accumulate(grads, *k, dk);
                }
                if needs(*v) {
                    accumulate(grads, *v, dv);
                }
            }
        }
        Ok(())
    }
}

fn strip<T>(op: Op<T>) -> Op<T> {
    match op {
        Op::BatchNorm {
            x,
            gamma,
            beta,
            mean,
            var,
            ..
        } => Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat: Matrix::empty_placeholder(),
            inv_std: Vec::new(),
            mean,
            var,
        },
        Op::LayerNorm { x, .. } => Op::LayerNorm {
            x,
            xhat: Matrix::empty_placeholder(),
            inv_std: Vec::new(),
        },
        Op::Attention {
            q,
            k,
            v,
            heads,
            seq_len,
            ..
        } => Op::Attention {
            q,
            k,
            v,
            heads,
            seq_len,
            probs: Vec::new(),
        },
        other => other,
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], id: NodeId, g: Matrix<T>) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = vec![T::zero(); m.cols()];
    for row in m.iter_rows() {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    Matrix::from_parts_unchecked(1, m.cols(), out)
}

pub(crate) fn depthwise_conv_forward<T: Scalar>(
    x: &Matrix<T>,
    w: &Matrix<T>,
    bias: Option<&[T]>,
    seq_len: usize,
) -> Matrix<T> {
    let (n, c) = x.shape();
    let k = w.cols();
    let pad = k / 2;
    let mut out = Matrix::zeros(n, c);
    let seq_block = seq_len * c;
    let kernel = |(b, out_seq): (usize, &mut [T])| {
        let base = b * seq_len;
        for t in 0..seq_len {
            let orow = &mut out_seq[t * c..(t + 1) * c];
            if let Some(bias) = bias {
                orow.copy_from_slice(bias);
            }
            for j in 0..k {
                let src = t as isize + j as isize - pad as isize;
                if src < 0 || src >= seq_len as isize {
                    continue;
                }
                let xrow = x.row(base + src as usize);
                for ch in 0..c {
                    orow[ch] = orow[ch] + w.get(ch, j) * xrow[ch];
                }
            }
        }
    };
    if n * c * k >= 1 << 15 {
        out.data_mut()
            .par_chunks_mut(seq_block)
            .enumerate()
            .for_each(kernel);
    } else {
        out.data_mut()
            .chunks_mut(seq_block)
            .enumerate()
            .for_each(kernel);
    }
    out
}

fn depthwise_conv_backward<T: Scalar>(
    x: &Matrix<T>,
    w: &Matrix<T>,
    dy: &Matrix<T>,
    seq_len: usize,
) -> (Matrix<T>, Matrix<T>) {
    let (n, c) = x.shape();
    let k = w.cols();
    let pad = k / 2;
    let mut dx = Matrix::zeros(n, c);
    let mut dw = Matrix::zeros(c, k);
    for b in 0..n / seq_len {
        let base = b * seq_len;
        for t in 0..seq_len {
            let drow = dy.row(base + t);
            for j in 0..k {
                let src = t as isize + j as isize - pad as isize;
                if src < 0 || src >= seq_len as isize {
                    continue;
                }
                let src = base + src as usize;
                for ch in 0..c {
                    let d = drow[ch];
                    let idx = ch * k + j;
                    dw.data_mut()[idx] = dw.data()[idx] + d * x.get(src, ch);
                    let xi = src * c + ch;
                    dx.data_mut()[xi] = dx.data()[xi] + d * w.get(ch, j);
                }
            }
        }
    }
    (dx, dw)
}

pub(crate) fn attention_forward<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    heads: usize,
    seq_len: usize,
    causal: bool,
) -> (Matrix<T>, Vec<T>) {
    let (n, c) = q.shape();
    let dh = c / heads;
    let scale = T::one() / s::<T>(dh as f64).sqrt();
    let batches = n / seq_len;
    let (l, cs) = (seq_len, c as isize);
    let mut out = Matrix::zeros(n, c);
    let mut probs = vec![T::zero(); batches * heads * l * l];
    out.data_mut()
        .par_chunks_mut(l * c)
        .zip(probs.par_chunks_mut(heads * l * l))
        .enumerate()
        .for_each(|(b, (oseq, pseq))| {
            let base = b * l * c;
            for h in 0..heads {
                let off = base + h * dh;
                let ph = &mut pseq[h * l * l..(h + 1) * l * l];
                // S = Q_h · K_hᵀ, then O_h = softmax(S) · V_h
                unsafe {
                    T::gemm(
                        l,
                        dh,
                        l,
                        &q.data()[off..],
                        cs,
                        1,
                        &k.data()[off..],
                        1,
                        cs,
                        ph,
                        l as isize,
                    );
                }
                for (i, prow) in ph.chunks_mut(l).enumerate() {
                    let limit = if causal { i + 1 } else { l };
                    prow[..limit].iter_mut().for_each(|x| *x = *x * scale);
                    softmax_in_place(&mut prow[..limit], T::one());
                    prow[limit..].iter_mut().for_each(|x| *x = T::zero());
                }
                unsafe {
                    T::gemm(
                        l,
                        l,
                        dh,
                        ph,
                        l as isize,
                        1,
                        &v.data()[off..],
                        cs,
                        1,
                        &mut oseq[h * dh..],
                        cs,
                    );
                }
            }
        });
    (out, probs)
}

fn attention_backward<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    dy: &Matrix<T>,
    probs: &[T],
    heads: usize,
    seq_len: usize,
) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
    let (n, c) = q.shape();
    let dh = c / heads;
    let scale = T::one() / s::<T>(dh as f64).sqrt();
    let (l, cs) = (seq_len, c as isize);
    let mut dq = Matrix::zeros(n, c);
    let mut dk = Matrix::zeros(n, c);
    let mut dv = Matrix::zeros(n, c);
    let block = l * c;
    dq.data_mut()
        .par_chunks_mut(block)
        .zip(dk.data_mut().par_chunks_mut(block))
        .zip(dv.data_mut().par_chunks_mut(block))
        .enumerate()
        .for_each(|(b, ((dqs, dks), dvs))| {
            let base = b * block;
            let pseq = &probs[b * heads * l * l..(b + 1) * heads * l * l];
            let mut ds = vec![T::zero(); l * l];
            for h in 0..heads {
                let off = base + h * dh;
                let ph = &pseq[h * l * l..(h + 1) * l * l];
                unsafe {
                    // dV_h = Pᵀ · dO_h ; dP = dO_h · V_hᵀ
                    T::gemm(
                        l,
                        l,
                        dh,
                        ph,
                        1,
                        l as isize,
                        &dy.data()[off..],
                        cs,
                        1,
                        &mut dvs[h * dh..],
                        cs,
                    );
                    T::gemm(
                        l,
                        dh,
                        l,
                        &dy.data()[off..],
                        cs,
                        1,
                        &v.data()[off..],
                        1,
                        cs,
                        &mut ds,
                        l as isize,
                    );
                }
                for (drow, prow) in ds.chunks_mut(l).zip(ph.chunks(l)) {
                    let inner = dot(drow, prow);
                    for (d, &p) in drow.iter_mut().zip(prow) {
                        *d = p * (*d - inner) * scale;
                    }
                }
                unsafe {
                    // dQ_h = dS · K_h ; dK_h = dSᵀ · Q_h
                    T::gemm(
                        l,
                        l,
                        dh,
                        &ds,
                        l as isize,
                        1,
                        &k.data()[off..],
                        cs,
                        1,
                        &mut dqs[h * dh..],
                        cs,
                    );
                    T::gemm(
                        l,
                        l,
                        dh,
                        &ds,
                        1,
                        l as isize,
                        &q.data()[off..],
                        cs,
                        1,
                        &mut dks[h * dh..],
                        cs,
                    );
                }
            }
        });
    (dq, dk, dv)
}
