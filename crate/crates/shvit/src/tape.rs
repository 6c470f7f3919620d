//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! Forward operations append records to a [`Tape`]; [`Tape::backward`] replays
//! the records in reverse and accumulates gradients into every tensor that
//! requires them. Records are stored in execution order, so reverse iteration
//! is a valid topological order (an op's inputs always precede it).

use crate::distill::{DistillConfig, DistillMode};
use crate::tensor::{Tensor, TensorError, TensorResult};

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum OpRecord {
    Leaf,
    Add {
        a: TensorId,
        b: TensorId,
    },
    AddBias {
        x: TensorId,
        bias: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        x: TensorId,
        factor: f64,
    },
    Matmul {
        a: TensorId,
        b: TensorId,
    },
    Transpose {
        x: TensorId,
    },
    Softmax {
        x: TensorId,
        axis: usize,
    },
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    },
    Gelu {
        x: TensorId,
    },
    CrossEntropy {
        logits: TensorId,
        labels: Vec<usize>,
    },
    DistillLoss {
        student: TensorId,
        teacher: TensorId,
        labels: Vec<usize>,
        mode: DistillMode,
        alpha: f64,
        temperature: f64,
    },
    Sum {
        x: TensorId,
    },
    Mean {
        x: TensorId,
    },
    ConcatRows {
        parts: Vec<TensorId>,
    },
    ConcatCols {
        parts: Vec<TensorId>,
    },
    SliceRows {
        x: TensorId,
        start: usize,
        end: usize,
    },
    SliceCols {
        x: TensorId,
        start: usize,
        end: usize,
    },
    PermuteRows {
        x: TensorId,
        perm: Vec<usize>,
    },
    L2NormalizeRows {
        x: TensorId,
    },
}

struct Node {
    tensor: Tensor,
    op: OpRecord,
}

/// Ordered record of executed differentiable operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    spent: bool,
}

/// GELU, tanh approximation:
/// `0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))`.
pub fn gelu_scalar(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
    const CUBIC: f64 = 0.044715;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + CUBIC * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
    const CUBIC: f64 = 0.044715;
    let u = SQRT_2_OVER_PI * (x + CUBIC * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Row-wise softmax of `logits` scaled by `1/temperature`, with
/// max-subtraction for stability. `rows * cols == logits.len()`.
fn softmax_rows(logits: &[f64], rows: usize, cols: usize, temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = ((v - max) / temperature).exp();
            out[r * cols + j] = e;
            sum += e;
        }
        for j in 0..cols {
            out[r * cols + j] /= sum;
        }
    }
    out
}

const L2_NORM_FLOOR: f64 = 1e-30;

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

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad()
    }

    /// Stores `tensor` as a leaf (an input; gradients accumulate into it when
    /// it requires them, but nothing propagates past it).
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        self.push(tensor, OpRecord::Leaf)
    }

    /// Leaf that participates in differentiation.
    pub fn var(&mut self, tensor: Tensor) -> TensorId {
        self.leaf(tensor.with_requires_grad())
    }

    /// Constant leaf: gradients never accumulate into it.
    pub fn constant(&mut self, mut tensor: Tensor) -> TensorId {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    fn push(&mut self, tensor: Tensor, op: OpRecord) -> TensorId {
        self.nodes.push(Node { tensor, op });
        TensorId(self.nodes.len() - 1)
    }

    fn push_op(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        op: OpRecord,
    ) -> TensorResult<TensorId> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut t = Tensor::new(shape, data)?;
        t.set_requires_grad(requires_grad);
        Ok(self.push(t, op))
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].tensor.requires_grad()
    }

    // ------------------------------------------------------------------
    // Forward operations
    // ------------------------------------------------------------------

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.requires(a) || self.requires(b);
        self.push_op("add", shape, data, rg, OpRecord::Add { a, b })
    }

    /// Adds a length-`n` bias to every row of an `m x n` tensor.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> TensorResult<TensorId> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tx.cols();
        if tb.numel() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let rows = tx.rows();
        let mut data = tx.data().to_vec();
        for r in 0..rows {
            for j in 0..n {
                data[r * n + j] += tb.data()[j];
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.requires(x) || self.requires(bias);
        self.push_op("add_bias", shape, data, rg, OpRecord::AddBias { x, bias })
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.requires(a) || self.requires(b);
        self.push_op("mul", shape, data, rg, OpRecord::Mul { a, b })
    }

    pub fn scale(&mut self, x: TensorId, factor: f64) -> TensorResult<TensorId> {
        if !factor.is_finite() {
            return Err(TensorError::InvalidValue {
                what: "scale factor",
                value: factor,
            });
        }
        let tx = self.value(x);
        let data: Vec<f64> = tx.data().iter().map(|v| v * factor).collect();
        let shape = tx.shape().to_vec();
        let rg = self.requires(x);
        self.push_op("scale", shape, data, rg, OpRecord::Scale { x, factor })
    }

    /// Matrix product of `a: [m x k]` and `b: [k x n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        let rg = self.requires(a) || self.requires(b);
        self.push_op("matmul", vec![m, n], data, rg, OpRecord::Matmul { a, b })
    }

    pub fn transpose(&mut self, x: TensorId) -> TensorResult<TensorId> {
        let tx = self.value(x);
        if tx.shape().len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                left: tx.shape().to_vec(),
                right: vec![],
            });
        }
        let (m, n) = (tx.shape()[0], tx.shape()[1]);
        let data = transpose_raw(tx.data(), m, n);
        let rg = self.requires(x);
        self.push_op("transpose", vec![n, m], data, rg, OpRecord::Transpose { x })
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> TensorResult<TensorId> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis { axis, shape });
        }
        let lanes = LaneIter::new(&shape, axis);
        let mut data = vec![0.0; tx.numel()];
        for lane in lanes.clone() {
            let vals: Vec<f64> = lane.iter().map(|&i| tx.data()[i]).collect();
            let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = vals.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (pos, &i) in lane.iter().enumerate() {
                data[i] = exps[pos] / sum;
            }
        }
        let rg = self.requires(x);
        self.push_op("softmax", shape, data, rg, OpRecord::Softmax { x, axis })
    }

    /// Per-vector standardization over the trailing dimension followed by the
    /// affine map `gamma * xhat + beta`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> TensorResult<TensorId> {
        if eps <= 0.0 {
            return Err(TensorError::InvalidValue {
                what: "layer_norm eps",
                value: eps,
            });
        }
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.cols();
        if tg.numel() != d || tb.numel() != d {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: tx.shape().to_vec(),
                right: tg.shape().to_vec(),
            });
        }
        let rows = tx.rows();
        let mut data = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let (mean, var) = mean_var(row);
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[r * d + j] = (row[j] - mean) * inv * tg.data()[j] + tb.data()[j];
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.push_op(
            "layer_norm",
            shape,
            data,
            rg,
            OpRecord::LayerNorm { x, gamma, beta, eps },
        )
    }

    /// Elementwise GELU (tanh approximation, see [`gelu_scalar`]).
    pub fn gelu(&mut self, x: TensorId) -> TensorResult<TensorId> {
        let tx = self.value(x);
        let data: Vec<f64> = tx.data().iter().map(|&v| gelu_scalar(v)).collect();
        let shape = tx.shape().to_vec();
        let rg = self.requires(x);
        self.push_op("gelu", shape, data, rg, OpRecord::Gelu { x })
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> TensorResult<TensorId> {
        let tl = self.value(logits);
        let (b, c) = (tl.rows(), tl.cols());
        if labels.len() != b {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        for &l in labels {
            if l >= c {
                return Err(TensorError::LabelOutOfRange { label: l, classes: c });
            }
        }
        let loss = cross_entropy_raw(tl.data(), b, c, labels);
        let rg = self.requires(logits);
        self.push_op(
            "cross_entropy",
            vec![1],
            vec![loss],
            rg,
            OpRecord::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        )
    }

    /// Combined identity / distillation loss over one batch of logits.
    ///
    /// soft: `(1-alpha) * CE(student, labels) + alpha * T^2 * mean_KL(p || q)`
    /// with `p = softmax(teacher/T)`, `q = softmax(student/T)`;
    /// hard: `(1-alpha) * CE(student, labels) + alpha * CE(student, argmax teacher)`;
    /// off: plain `CE(student, labels)`.
    /// Differentiates with respect to the student logits only.
    pub fn distill_loss(
        &mut self,
        student: TensorId,
        teacher: TensorId,
        labels: &[usize],
        cfg: &DistillConfig,
    ) -> TensorResult<TensorId> {
        cfg.validate()?;
        let (ts, tt) = (self.value(student), self.value(teacher));
        if ts.shape() != tt.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "distill_loss",
                left: ts.shape().to_vec(),
                right: tt.shape().to_vec(),
            });
        }
        let (b, c) = (ts.rows(), ts.cols());
        if labels.len() != b {
            return Err(TensorError::ShapeMismatch {
                op: "distill_loss",
                left: ts.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        for &l in labels {
            if l >= c {
                return Err(TensorError::LabelOutOfRange { label: l, classes: c });
            }
        }
        let loss = distill_loss_raw(ts.data(), tt.data(), b, c, labels, cfg);
        let rg = self.requires(student);
        self.push_op(
            "distill_loss",
            vec![1],
            vec![loss],
            rg,
            OpRecord::DistillLoss {
                student,
                teacher,
                labels: labels.to_vec(),
                mode: cfg.mode,
                alpha: cfg.alpha,
                temperature: cfg.temperature,
            },
        )
    }

    pub fn sum(&mut self, x: TensorId) -> TensorResult<TensorId> {
        let tx = self.value(x);
        let s: f64 = tx.data().iter().sum();
        let rg = self.requires(x);
        self.push_op("sum", vec![1], vec![s], rg, OpRecord::Sum { x })
    }

    pub fn mean(&mut self, x: TensorId) -> TensorResult<TensorId> {
        let tx = self.value(x);
        let s: f64 = tx.data().iter().sum::<f64>() / tx.numel() as f64;
        let rg = self.requires(x);
        self.push_op("mean", vec![1], vec![s], rg, OpRecord::Mean { x })
    }

    /// Vertical concatenation of 2-d tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> TensorResult<TensorId> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat_rows" });
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        let mut rg = false;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: vec![cols],
                    right: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
            rg |= t.requires_grad();
        }
        self.push_op(
            "concat_rows",
            vec![rows, cols],
            data,
            rg,
            OpRecord::ConcatRows {
                parts: parts.to_vec(),
            },
        )
    }

    /// Horizontal concatenation of 2-d tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorResult<TensorId> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat_cols" });
        }
        let rows = self.value(parts[0]).rows();
        let mut total_cols = 0;
        let mut rg = false;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: vec![rows],
                    right: t.shape().to_vec(),
                });
            }
            total_cols += t.cols();
            rg |= t.requires_grad();
        }
        let mut data = vec![0.0; rows * total_cols];
        let mut col_off = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for r in 0..rows {
                data[r * total_cols + col_off..r * total_cols + col_off + c]
                    .copy_from_slice(t.row(r));
            }
            col_off += c;
        }
        self.push_op(
            "concat_cols",
            vec![rows, total_cols],
            data,
            rg,
            OpRecord::ConcatCols {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn slice_rows(&mut self, x: TensorId, start: usize, end: usize) -> TensorResult<TensorId> {
        let tx = self.value(x);
        let (rows, cols) = (tx.rows(), tx.cols());
        if start >= end || end > rows {
            return Err(TensorError::BadIndexing { op: "slice_rows" });
        }
        let data = tx.data()[start * cols..end * cols].to_vec();
        let rg = self.requires(x);
        self.push_op(
            "slice_rows",
            vec![end - start, cols],
            data,
            rg,
            OpRecord::SliceRows { x, start, end },
        )
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, end: usize) -> TensorResult<TensorId> {
        let tx = self.value(x);
        let (rows, cols) = (tx.rows(), tx.cols());
        if start >= end || end > cols {
            return Err(TensorError::BadIndexing { op: "slice_cols" });
        }
        let w = end - start;
        let mut data = vec![0.0; rows * w];
        for r in 0..rows {
            data[r * w..(r + 1) * w].copy_from_slice(&tx.data()[r * cols + start..r * cols + end]);
        }
        let rg = self.requires(x);
        self.push_op(
            "slice_cols",
            vec![rows, w],
            data,
            rg,
            OpRecord::SliceCols { x, start, end },
        )
    }

    /// Row gather: output row `i` is input row `perm[i]`. `perm` must be a
    /// bijection on `0..rows`.
    pub fn permute_rows(&mut self, x: TensorId, perm: &[usize]) -> TensorResult<TensorId> {
        let tx = self.value(x);
        let (rows, cols) = (tx.rows(), tx.cols());
        if perm.len() != rows || !is_permutation(perm) {
            return Err(TensorError::BadIndexing { op: "permute_rows" });
        }
        let mut data = vec![0.0; rows * cols];
        for (i, &src) in perm.iter().enumerate() {
            data[i * cols..(i + 1) * cols].copy_from_slice(tx.row(src));
        }
        let rg = self.requires(x);
        self.push_op(
            "permute_rows",
            vec![rows, cols],
            data,
            rg,
            OpRecord::PermuteRows {
                x,
                perm: perm.to_vec(),
            },
        )
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: TensorId) -> TensorResult<TensorId> {
        let tx = self.value(x);
        let (rows, cols) = (tx.rows(), tx.cols());
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = tx.row(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(L2_NORM_FLOOR);
            for j in 0..cols {
                data[r * cols + j] = row[j] / norm;
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.requires(x);
        self.push_op(
            "l2_normalize_rows",
            shape,
            data,
            rg,
            OpRecord::L2NormalizeRows { x },
        )
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Accumulates `d loss / d tensor` into every recorded tensor that
    /// requires gradients. Errors on a non-scalar or detached loss, and on a
    /// second call without rebuilding the forward pass.
    pub fn backward(&mut self, loss: TensorId) -> TensorResult<()> {
        if self.spent {
            return Err(TensorError::DoubleBackward);
        }
        {
            let lt = &self.nodes[loss.0].tensor;
            if !lt.is_scalar() {
                return Err(TensorError::NonScalarLoss {
                    shape: lt.shape().to_vec(),
                });
            }
            if !lt.requires_grad() {
                return Err(TensorError::DetachedLoss);
            }
        }
        self.spent = true;
        self.nodes[loss.0].tensor.set_grad(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tensor.requires_grad() {
                continue;
            }
            let upstream = match self.nodes[i].tensor.grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            let contributions = self.input_grads(i, &op, &upstream);
            for (id, contrib) in contributions {
                self.nodes[id.0].tensor.accumulate_grad(&contrib);
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `out` to each of its inputs that
    /// requires gradients.
    fn input_grads(
        &self,
        out: usize,
        op: &OpRecord,
        upstream: &[f64],
    ) -> Vec<(TensorId, Vec<f64>)> {
        let mut result: Vec<(TensorId, Vec<f64>)> = Vec::new();
        let mut emit = |id: TensorId, grad: Vec<f64>, tape: &Tape| {
            if tape.requires(id) {
                result.push((id, grad));
            }
        };
        match op {
            OpRecord::Leaf => {}
            OpRecord::Add { a, b } => {
                if self.requires(*a) {
                    emit(*a, upstream.to_vec(), self);
                }
                if self.requires(*b) {
                    emit(*b, upstream.to_vec(), self);
                }
            }
            OpRecord::AddBias { x, bias } => {
                if self.requires(*x) {
                    emit(*x, upstream.to_vec(), self);
                }
                if self.requires(*bias) {
                    let n = self.value(*bias).numel();
                    let rows = upstream.len() / n;
                    let mut g = vec![0.0; n];
                    for r in 0..rows {
                        for j in 0..n {
                            g[j] += upstream[r * n + j];
                        }
                    }
                    emit(*bias, g, self);
                }
            }
            OpRecord::Mul { a, b } => {
                if self.requires(*a) {
                    let g = upstream
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(u, v)| u * v)
                        .collect();
                    emit(*a, g, self);
                }
                if self.requires(*b) {
                    let g = upstream
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(u, v)| u * v)
                        .collect();
                    emit(*b, g, self);
                }
            }
            OpRecord::Scale { x, factor } => {
                if self.requires(*x) {
                    emit(*x, upstream.iter().map(|u| u * factor).collect(), self);
                }
            }
            OpRecord::Matmul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.requires(*a) {
                    // dA = dC . B^T
                    let bt = transpose_raw(tb.data(), k, n);
                    emit(*a, matmul_raw(upstream, &bt, m, n, k), self);
                }
                if self.requires(*b) {
                    // dB = A^T . dC
                    let at = transpose_raw(ta.data(), m, k);
                    emit(*b, matmul_raw(&at, upstream, k, m, n), self);
                }
            }
            OpRecord::Transpose { x } => {
                if self.requires(*x) {
                    let t = &self.nodes[out].tensor;
                    let (n, m) = (t.shape()[0], t.shape()[1]);
                    emit(*x, transpose_raw(upstream, n, m), self);
                }
            }
            OpRecord::Softmax { x, axis } => {
                if self.requires(*x) {
                    let y = self.nodes[out].tensor.data();
                    let shape = self.value(*x).shape().to_vec();
                    let mut g = vec![0.0; y.len()];
                    for lane in LaneIter::new(&shape, *axis) {
                        let dot: f64 = lane.iter().map(|&i| upstream[i] * y[i]).sum();
                        for &i in &lane {
                            g[i] = y[i] * (upstream[i] - dot);
                        }
                    }
                    emit(*x, g, self);
                }
            }
            OpRecord::LayerNorm { x, gamma, beta, eps } => {
                let tx = self.value(*x);
                let tg = self.value(*gamma);
                let d = tx.cols();
                let rows = tx.rows();
                let need_x = self.requires(*x);
                let need_g = self.requires(*gamma);
                let need_b = self.requires(*beta);
                let mut gx = vec![0.0; tx.numel()];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for r in 0..rows {
                    let row = &tx.data()[r * d..(r + 1) * d];
                    let up = &upstream[r * d..(r + 1) * d];
                    let (mean, var) = mean_var(row);
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    if need_g || need_b {
                        for j in 0..d {
                            gg[j] += up[j] * xhat[j];
                            gb[j] += up[j];
                        }
                    }
                    if need_x {
                        let dy: Vec<f64> =
                            (0..d).map(|j| up[j] * tg.data()[j]).collect();
                        let mean_dy = dy.iter().sum::<f64>() / d as f64;
                        let mean_dy_xhat =
                            dy.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] = inv * (dy[j] - mean_dy - xhat[j] * mean_dy_xhat);
                        }
                    }
                }
                if need_x {
                    emit(*x, gx, self);
                }
                if need_g {
                    emit(*gamma, gg, self);
                }
                if need_b {
                    emit(*beta, gb, self);
                }
            }
            OpRecord::Gelu { x } => {
                if self.requires(*x) {
                    let g = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(upstream)
                        .map(|(&v, u)| gelu_grad_scalar(v) * u)
                        .collect();
                    emit(*x, g, self);
                }
            }
            OpRecord::CrossEntropy { logits, labels } => {
                if self.requires(*logits) {
                    let tl = self.value(*logits);
                    let (b, c) = (tl.rows(), tl.cols());
                    let mut g = softmax_rows(tl.data(), b, c, 1.0);
                    for (r, &l) in labels.iter().enumerate() {
                        g[r * c + l] -= 1.0;
                    }
                    let scale = upstream[0] / b as f64;
                    for v in &mut g {
                        *v *= scale;
                    }
                    emit(*logits, g, self);
                }
            }
            OpRecord::DistillLoss {
                student,
                teacher,
                labels,
                mode,
                alpha,
                temperature,
            } => {
                // Teacher logits never receive gradients.
                if self.requires(*student) {
                    let ts = self.value(*student);
                    let tt = self.value(*teacher);
                    let (b, c) = (ts.rows(), ts.cols());
                    let g = distill_grad_raw(
                        ts.data(),
                        tt.data(),
                        b,
                        c,
                        labels,
                        *mode,
                        *alpha,
                        *temperature,
                        upstream[0],
                    );
                    emit(*student, g, self);
                }
            }
            OpRecord::Sum { x } => {
                if self.requires(*x) {
                    emit(*x, vec![upstream[0]; self.value(*x).numel()], self);
                }
            }
            OpRecord::Mean { x } => {
                if self.requires(*x) {
                    let n = self.value(*x).numel();
                    emit(*x, vec![upstream[0] / n as f64; n], self);
                }
            }
            OpRecord::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let t = self.value(p);
                    let len = t.numel();
                    if self.requires(p) {
                        emit(p, upstream[off..off + len].to_vec(), self);
                    }
                    off += len;
                }
            }
            OpRecord::ConcatCols { parts } => {
                let rows = self.value(parts[0]).rows();
                let total_cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
                let mut col_off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.requires(p) {
                        let mut g = vec![0.0; rows * c];
                        for r in 0..rows {
                            g[r * c..(r + 1) * c].copy_from_slice(
                                &upstream[r * total_cols + col_off..r * total_cols + col_off + c],
                            );
                        }
                        emit(p, g, self);
                    }
                    col_off += c;
                }
            }
            OpRecord::SliceRows { x, start, end } => {
                if self.requires(*x) {
                    let tx = self.value(*x);
                    let cols = tx.cols();
                    let mut g = vec![0.0; tx.numel()];
                    g[start * cols..end * cols].copy_from_slice(upstream);
                    emit(*x, g, self);
                }
            }
            OpRecord::SliceCols { x, start, end } => {
                if self.requires(*x) {
                    let tx = self.value(*x);
                    let (rows, cols) = (tx.rows(), tx.cols());
                    let w = end - start;
                    let mut g = vec![0.0; tx.numel()];
                    for r in 0..rows {
                        g[r * cols + start..r * cols + end]
                            .copy_from_slice(&upstream[r * w..(r + 1) * w]);
                    }
                    emit(*x, g, self);
                }
            }
            OpRecord::PermuteRows { x, perm } => {
                if self.requires(*x) {
                    let tx = self.value(*x);
                    let cols = tx.cols();
                    let mut g = vec![0.0; tx.numel()];
                    for (i, &src) in perm.iter().enumerate() {
                        for j in 0..cols {
                            g[src * cols + j] += upstream[i * cols + j];
                        }
                    }
                    emit(*x, g, self);
                }
            }
            OpRecord::L2NormalizeRows { x } => {
                if self.requires(*x) {
                    let tx = self.value(*x);
                    let (rows, cols) = (tx.rows(), tx.cols());
                    let y = self.nodes[out].tensor.data();
                    let mut g = vec![0.0; tx.numel()];
                    for r in 0..rows {
                        let row = tx.row(r);
                        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(L2_NORM_FLOOR);
                        let dot: f64 = (0..cols)
                            .map(|j| upstream[r * cols + j] * y[r * cols + j])
                            .sum();
                        for j in 0..cols {
                            g[r * cols + j] =
                                (upstream[r * cols + j] - y[r * cols + j] * dot) / norm;
                        }
                    }
                    emit(*x, g, self);
                }
            }
        }
        result
    }
}

/// Plain triple-loop matrix product (ikj order), shared by forward and
/// backward paths.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

fn transpose_raw(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, var)
}

fn cross_entropy_raw(logits: &[f64], b: usize, c: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for r in 0..b {
        let row = &logits[r * c..(r + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        total += log_sum - row[labels[r]];
    }
    total / b as f64
}

fn distill_loss_raw(
    student: &[f64],
    teacher: &[f64],
    b: usize,
    c: usize,
    labels: &[usize],
    cfg: &DistillConfig,
) -> f64 {
    let ce = cross_entropy_raw(student, b, c, labels);
    match cfg.mode {
        DistillMode::Off => ce,
        DistillMode::Hard => {
            let pseudo = teacher_argmax(teacher, b, c);
            let ce_t = cross_entropy_raw(student, b, c, &pseudo);
            (1.0 - cfg.alpha) * ce + cfg.alpha * ce_t
        }
        DistillMode::Soft => {
            let t = cfg.temperature;
            let p = softmax_rows(teacher, b, c, t);
            let q = softmax_rows(student, b, c, t);
            let mut kl = 0.0;
            for i in 0..b * c {
                if p[i] > 0.0 {
                    kl += p[i] * (p[i].ln() - q[i].ln());
                }
            }
            kl /= b as f64;
            (1.0 - cfg.alpha) * ce + cfg.alpha * t * t * kl
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn distill_grad_raw(
    student: &[f64],
    teacher: &[f64],
    b: usize,
    c: usize,
    labels: &[usize],
    mode: DistillMode,
    alpha: f64,
    temperature: f64,
    upstream: f64,
) -> Vec<f64> {
    let ce_grad = |labels: &[usize]| -> Vec<f64> {
        let mut g = softmax_rows(student, b, c, 1.0);
        for (r, &l) in labels.iter().enumerate() {
            g[r * c + l] -= 1.0;
        }
        for v in &mut g {
            *v /= b as f64;
        }
        g
    };
    let mut g = match mode {
        DistillMode::Off => ce_grad(labels),
        DistillMode::Hard => {
            let mut g = ce_grad(labels);
            let pseudo = teacher_argmax(teacher, b, c);
            let gt = ce_grad(&pseudo);
            for i in 0..g.len() {
                g[i] = (1.0 - alpha) * g[i] + alpha * gt[i];
            }
            g
        }
        DistillMode::Soft => {
            let t = temperature;
            let p = softmax_rows(teacher, b, c, t);
            let q = softmax_rows(student, b, c, t);
            let mut g = ce_grad(labels);
            // d(T^2 * mean KL)/ds = T * (q - p) / b
            for i in 0..g.len() {
                g[i] = (1.0 - alpha) * g[i] + alpha * t * (q[i] - p[i]) / b as f64;
            }
            g
        }
    };
    for v in &mut g {
        *v *= upstream;
    }
    g
}

fn teacher_argmax(teacher: &[f64], b: usize, c: usize) -> Vec<usize> {
    (0..b)
        .map(|r| {
            let row = &teacher[r * c..(r + 1) * c];
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

/// Iterates the index sets of all 1-d lanes along `axis` of a row-major
/// tensor with the given shape.
#[derive(Clone)]
struct LaneIter {
    outer: usize,
    inner: usize,
    len: usize,
    pos: usize,
}

impl LaneIter {
    fn new(shape: &[usize], axis: usize) -> Self {
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        Self {
            outer,
            inner,
            len: shape[axis],
            pos: 0,
        }
    }
}

impl Iterator for LaneIter {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.outer * self.inner {
            return None;
        }
        let o = self.pos / self.inner;
        let i = self.pos % self.inner;
        self.pos += 1;
        Some(
            (0..self.len)
                .map(|l| o * self.len * self.inner + l * self.inner + i)
                .collect(),
        )
    }
}
