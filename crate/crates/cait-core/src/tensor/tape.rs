//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every forward op validates shapes, computes its value, rejects
//! non-finite results, and records a node. `backward` replays the nodes in
//! reverse, accumulating gradients for everything reachable from the loss
//! that requires them. Inputs always precede outputs on the tape, so the
//! reverse sweep is a valid topological order.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels;
use super::Tensor;
use crate::error::{CoreError, Result};
use crate::math;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    AddRow { a: TensorId, row: TensorId },
    ScaleRows { a: TensorId, diag: TensorId },
    ScaleScalar { a: TensorId, s: TensorId },
    ScaleConst { a: TensorId, c: f64 },
    ApplyMask { a: TensorId, mask: Vec<f64> },
    Softmax { a: TensorId },
    LayerNorm { a: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    Gelu { a: TensorId },
    Transpose { a: TensorId },
    Reshape { a: TensorId },
    MeanRows { a: TensorId },
    MeanAll { a: TensorId },
    SumAll { a: TensorId },
    SliceRows { a: TensorId, start: usize },
    SliceCols { a: TensorId, start: usize },
    ConcatRows { parts: Vec<TensorId> },
    ConcatCols { parts: Vec<TensorId> },
    MixHeads { a: TensorId, mix: TensorId },
    CrossEntropy { logits: TensorId, target: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::AddRow { .. } => "add_row",
            Op::ScaleRows { .. } => "scale_rows",
            Op::ScaleScalar { .. } => "scale_scalar",
            Op::ScaleConst { .. } => "scale_const",
            Op::ApplyMask { .. } => "apply_mask",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::MeanRows { .. } => "mean_rows",
            Op::MeanAll { .. } => "mean_all",
            Op::SumAll { .. } => "sum_all",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows { .. } => "concat_rows",
            Op::ConcatCols { .. } => "concat_cols",
            Op::MixHeads { .. } => "mix_heads",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

/// Names of every differentiable op the tape records.
///
/// The finite-difference registry must cover exactly this list; a test
/// keeps the two in sync.
pub const DIFFERENTIABLE_OPS: &[&str] = &[
    "matmul",
    "add",
    "add_row",
    "scale_rows",
    "scale_scalar",
    "scale_const",
    "apply_mask",
    "softmax",
    "layer_norm",
    "gelu",
    "transpose",
    "reshape",
    "mean_rows",
    "mean_all",
    "sum_all",
    "slice_rows",
    "slice_cols",
    "concat_rows",
    "concat_cols",
    "mix_heads",
    "cross_entropy",
];

#[derive(Debug)]
struct Node {
    tensor: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of forward operations with their backward rules.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn dropout_keep(p: f64) -> f64 {
    1.0 - p
}

/// Sample an inverse-scaled dropout mask: kept entries carry `1/(1-p)`,
/// dropped entries are 0. In evaluation mode the mask is all ones.
pub fn dropout_mask(n: usize, p: f64, rng: &mut crate::rng::SeedRng, training: bool) -> Vec<f64> {
    if !training || p <= 0.0 {
        return vec![1.0; n];
    }
    let keep = dropout_keep(p);
    (0..n)
        .map(|_| if rng.bernoulli(p) { 0.0 } else { 1.0 / keep })
        .collect()
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

    /// Drop all recorded nodes and gradients.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    /// Gradient of the last `backward` target w.r.t. this node, if any
    /// was accumulated.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn op_name(&self, id: TensorId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    fn push(&mut self, tensor: Tensor, op: Op, needs_grad: bool) -> Result<TensorId> {
        if !tensor.is_finite() {
            return Err(CoreError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            tensor,
            op,
            needs_grad,
        });
        Ok(TensorId(self.nodes.len() - 1))
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn t(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    /// Insert a tensor as a leaf; `requires_grad` is taken from the tensor.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<TensorId> {
        let needs = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs)
    }

    /// Insert a leaf that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor) -> Result<TensorId> {
        tensor.requires_grad = false;
        self.push(tensor, Op::Leaf, false)
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.t(a), self.t(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                lhs: format!("{:?}", ta.shape()),
                rhs: format!("{:?}", tb.shape()),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn_acc(ta.data(), tb.data(), m, k, n, &mut out);
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(vec![m, n], out)?, Op::MatMul { a, b }, needs)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.t(a), self.t(b));
        if ta.shape() != tb.shape() {
            return Err(CoreError::ShapeMismatch {
                op: "add",
                lhs: format!("{:?}", ta.shape()),
                rhs: format!("{:?}", tb.shape()),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add { a, b }, needs)
    }

    /// Broadcast-add a length-`c` vector to every row of a 2-d tensor.
    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> Result<TensorId> {
        let (ta, tr) = (self.t(a), self.t(row));
        if ta.rank() != 2 || tr.numel() != ta.cols() {
            return Err(CoreError::ShapeMismatch {
                op: "add_row",
                lhs: format!("{:?}", ta.shape()),
                rhs: format!("{:?}", tr.shape()),
            });
        }
        let c = ta.cols();
        let rv = tr.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + rv[i % c])
            .collect();
        let out = Tensor::from_vec(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(row);
        self.push(out, Op::AddRow { a, row }, needs)
    }

    /// Multiply column `j` of every row by `diag[j]` (per-channel scaling).
    pub fn scale_rows(&mut self, a: TensorId, diag: TensorId) -> Result<TensorId> {
        let (ta, td) = (self.t(a), self.t(diag));
        if ta.rank() != 2 || td.numel() != ta.cols() {
            return Err(CoreError::ShapeMismatch {
                op: "scale_rows",
                lhs: format!("{:?}", ta.shape()),
                rhs: format!("{:?}", td.shape()),
            });
        }
        let c = ta.cols();
        let dv = td.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * dv[i % c])
            .collect();
        let out = Tensor::from_vec(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(diag);
        self.push(out, Op::ScaleRows { a, diag }, needs)
    }

    /// Multiply by a learnable scalar (a 1-element tensor).
    pub fn scale_scalar(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        let (ta, ts) = (self.t(a), self.t(s));
        if ts.numel() != 1 {
            return Err(CoreError::ShapeMismatch {
                op: "scale_scalar",
                lhs: format!("{:?}", ta.shape()),
                rhs: format!("{:?}", ts.shape()),
            });
        }
        let sv = ts.data()[0];
        let data = ta.data().iter().map(|x| x * sv).collect();
        let out = Tensor::from_vec(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(s);
        self.push(out, Op::ScaleScalar { a, s }, needs)
    }

    /// Multiply by a constant (not a learnable parameter).
    pub fn scale_const(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let ta = self.t(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let out = Tensor::from_vec(ta.shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push(out, Op::ScaleConst { a, c }, needs)
    }

    /// Elementwise multiply by a fixed mask (dropout application).
    pub fn apply_mask(&mut self, a: TensorId, mask: &[f64]) -> Result<TensorId> {
        let ta = self.t(a);
        if mask.len() != ta.numel() {
            return Err(CoreError::ShapeMismatch {
                op: "apply_mask",
                lhs: format!("{:?}", ta.shape()),
                rhs: format!("mask of length {}", mask.len()),
            });
        }
        let data = ta.data().iter().zip(mask).map(|(x, m)| x * m).collect();
        let out = Tensor::from_vec(ta.shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push(
            out,
            Op::ApplyMask {
                a,
                mask: mask.to_vec(),
            },
            needs,
        )
    }

    /// Row-stable softmax over the trailing axis.
    pub fn softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let ta = self.t(a);
        let n = ta.last_dim();
        if n == 0 {
            return Err(CoreError::InvalidDimension {
                op: "softmax",
                detail: format!("trailing axis of shape {:?} is empty", ta.shape()),
            });
        }
        if !ta.is_finite() {
            return Err(CoreError::NonFinite { op: "softmax" });
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = math::exp(*v - mx);
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let out = Tensor::from_vec(ta.shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push(out, Op::Softmax { a }, needs)
    }

    /// Per-vector normalization over the trailing axis, then affine.
    pub fn layer_norm(
        &mut self,
        a: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let (ta, tg, tb) = (self.t(a), self.t(gamma), self.t(beta));
        let d = ta.last_dim();
        if d == 0 {
            return Err(CoreError::InvalidDimension {
                op: "layer_norm",
                detail: format!("trailing axis of shape {:?} is empty", ta.shape()),
            });
        }
        if tg.numel() != d || tb.numel() != d {
            return Err(CoreError::ShapeMismatch {
                op: "layer_norm",
                lhs: format!("{:?}", ta.shape()),
                rhs: format!("gamma {:?}, beta {:?}", tg.shape(), tb.shape()),
            });
        }
        let (gv, bv) = (tg.data(), tb.data());
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / math::sqrt(var + eps);
            for (j, v) in row.iter_mut().enumerate() {
                *v = gv[j] * ((*v - mean) * inv) + bv[j];
            }
        }
        let out = Tensor::from_vec(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(gamma) || self.needs(beta);
        self.push(out, Op::LayerNorm { a, gamma, beta, eps }, needs)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        let ta = self.t(a);
        let data = ta
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + math::erf(x / math::SQRT_2)))
            .collect();
        let out = Tensor::from_vec(ta.shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push(out, Op::Gelu { a }, needs)
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let ta = self.t(a);
        if ta.rank() != 2 {
            return Err(CoreError::InvalidDimension {
                op: "transpose",
                detail: format!("expected rank 2, got shape {:?}", ta.shape()),
            });
        }
        let (r, c) = (ta.rows(), ta.cols());
        let src = ta.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let out = Tensor::from_vec(vec![c, r], data)?;
        let needs = self.needs(a);
        self.push(out, Op::Transpose { a }, needs)
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let ta = self.t(a);
        let numel: usize = shape.iter().product();
        if numel != ta.numel() {
            return Err(CoreError::ShapeMismatch {
                op: "reshape",
                lhs: format!("{:?}", ta.shape()),
                rhs: format!("{shape:?}"),
            });
        }
        let out = Tensor::from_vec(shape, ta.data().to_vec())?;
        let needs = self.needs(a);
        self.push(out, Op::Reshape { a }, needs)
    }

    /// Column means of a 2-d tensor, as a 1 x c row.
    pub fn mean_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let ta = self.t(a);
        if ta.rank() != 2 || ta.rows() == 0 {
            return Err(CoreError::InvalidDimension {
                op: "mean_rows",
                detail: format!("expected non-empty rank-2 input, got {:?}", ta.shape()),
            });
        }
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; c];
        for row in ta.data().chunks(c) {
            for (o, v) in data.iter_mut().zip(row) {
                *o += v;
            }
        }
        for v in data.iter_mut() {
            *v /= r as f64;
        }
        let out = Tensor::from_vec(vec![1, c], data)?;
        let needs = self.needs(a);
        self.push(out, Op::MeanRows { a }, needs)
    }

    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        let ta = self.t(a);
        if ta.numel() == 0 {
            return Err(CoreError::InvalidDimension {
                op: "mean_all",
                detail: format!("empty input of shape {:?}", ta.shape()),
            });
        }
        let v = ta.data().iter().sum::<f64>() / ta.numel() as f64;
        let needs = self.needs(a);
        self.push(Tensor::scalar(v), Op::MeanAll { a }, needs)
    }

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let ta = self.t(a);
        let v = ta.data().iter().sum::<f64>();
        let needs = self.needs(a);
        self.push(Tensor::scalar(v), Op::SumAll { a }, needs)
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let ta = self.t(a);
        if ta.rank() != 2 || start + len > ta.rows() {
            return Err(CoreError::InvalidDimension {
                op: "slice_rows",
                detail: format!("rows {start}..{} of shape {:?}", start + len, ta.shape()),
            });
        }
        let c = ta.cols();
        let data = ta.data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::from_vec(vec![len, c], data)?;
        let needs = self.needs(a);
        self.push(out, Op::SliceRows { a, start }, needs)
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let ta = self.t(a);
        if ta.rank() != 2 || start + len > ta.cols() {
            return Err(CoreError::InvalidDimension {
                op: "slice_cols",
                detail: format!("cols {start}..{} of shape {:?}", start + len, ta.shape()),
            });
        }
        let (r, c) = (ta.rows(), ta.cols());
        let src = ta.data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let out = Tensor::from_vec(vec![r, len], data)?;
        let needs = self.needs(a);
        self.push(out, Op::SliceCols { a, start }, needs)
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(CoreError::InvalidDimension {
                op: "concat_rows",
                detail: "no parts".into(),
            });
        }
        let c = self.t(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            let tp = self.t(p);
            if tp.rank() != 2 || tp.cols() != c {
                return Err(CoreError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: format!("[_, {c}]"),
                    rhs: format!("{:?}", tp.shape()),
                });
            }
            rows += tp.rows();
        }
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(self.t(p).data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let out = Tensor::from_vec(vec![rows, c], data)?;
        self.push(
            out,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            needs,
        )
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(CoreError::InvalidDimension {
                op: "concat_cols",
                detail: "no parts".into(),
            });
        }
        let r = self.t(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let tp = self.t(p);
            if tp.rank() != 2 || tp.rows() != r {
                return Err(CoreError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: format!("[{r}, _]"),
                    rhs: format!("{:?}", tp.shape()),
                });
            }
            cols += tp.cols();
        }
        let mut data = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                let tp = self.t(p);
                let c = tp.cols();
                data.extend_from_slice(&tp.data()[i * c..(i + 1) * c]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let out = Tensor::from_vec(vec![r, cols], data)?;
        self.push(
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            needs,
        )
    }

    /// Linear mixing across heads: input is `h` stacked `r x c` blocks,
    /// output block `g` is `sum_h mix[g][h] * block_h`.
    pub fn mix_heads(&mut self, a: TensorId, mix: TensorId) -> Result<TensorId> {
        let (ta, tm) = (self.t(a), self.t(mix));
        if tm.rank() != 2 || tm.rows() != tm.cols() {
            return Err(CoreError::InvalidDimension {
                op: "mix_heads",
                detail: format!("mix matrix must be square, got {:?}", tm.shape()),
            });
        }
        let h = tm.rows();
        if ta.rank() != 2 || ta.rows() % h != 0 {
            return Err(CoreError::ShapeMismatch {
                op: "mix_heads",
                lhs: format!("{:?}", ta.shape()),
                rhs: format!("{h} heads"),
            });
        }
        let r = ta.rows() / h;
        let c = ta.cols();
        let (src, mv) = (ta.data(), tm.data());
        let mut data = vec![0.0; ta.numel()];
        for g in 0..h {
            for hh in 0..h {
                let w = mv[g * h + hh];
                if w == 0.0 {
                    continue;
                }
                let dst = g * r * c;
                let sof = hh * r * c;
                for idx in 0..r * c {
                    data[dst + idx] += w * src[sof + idx];
                }
            }
        }
        let out = Tensor::from_vec(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(mix);
        self.push(out, Op::MixHeads { a, mix }, needs)
    }

    /// Cross-entropy of a single logit row against a fixed target
    /// distribution, computed via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: TensorId, target: &[f64]) -> Result<TensorId> {
        let tl = self.t(logits);
        if tl.numel() != target.len() || target.is_empty() {
            return Err(CoreError::ShapeMismatch {
                op: "cross_entropy",
                lhs: format!("{:?}", tl.shape()),
                rhs: format!("target of length {}", target.len()),
            });
        }
        let x = tl.data();
        let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + math::ln(x.iter().map(|v| math::exp(v - mx)).sum::<f64>());
        let loss = lse - x.iter().zip(target).map(|(v, t)| v * t).sum::<f64>();
        let needs = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target: target.to_vec(),
            },
            needs,
        )
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Accumulate gradients of the scalar node `loss` into every
    /// reachable node with `needs_grad`.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.t(loss).numel() != 1 {
            return Err(CoreError::InvalidDimension {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.t(loss).shape()),
            });
        }
        self.grads.clear();
        self.grads.resize_with(self.nodes.len(), || None);
        self.grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, id: usize, g: &[f64]) {
        let Tape { nodes, grads } = self;
        let node = &nodes[id];
        let out = &node.tensor;

        let needs = |t: TensorId| nodes[t.0].needs_grad;
        macro_rules! buf {
            ($t:expr) => {
                grads[$t.0]
                    .get_or_insert_with(|| vec![0.0; nodes[$t.0].tensor.numel()])
                    .as_mut_slice()
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (nodes[a.0].tensor.rows(), nodes[a.0].tensor.cols());
                let n = nodes[b.0].tensor.cols();
                if needs(*a) {
                    kernels::matmul_nt_acc(g, nodes[b.0].tensor.data(), m, n, k, buf!(a));
                }
                if needs(*b) {
                    kernels::matmul_tn_acc(nodes[a.0].tensor.data(), g, m, k, n, buf!(b));
                }
            }
            Op::Add { a, b } => {
                for t in [a, b] {
                    if needs(*t) {
                        for (o, v) in buf!(t).iter_mut().zip(g) {
                            *o += v;
                        }
                    }
                }
            }
            Op::AddRow { a, row } => {
                let c = nodes[a.0].tensor.cols();
                if needs(*a) {
                    for (o, v) in buf!(a).iter_mut().zip(g) {
                        *o += v;
                    }
                }
                if needs(*row) {
                    let rb = buf!(row);
                    for (i, v) in g.iter().enumerate() {
                        rb[i % c] += v;
                    }
                }
            }
            Op::ScaleRows { a, diag } => {
                let c = nodes[a.0].tensor.cols();
                if needs(*a) {
                    let dv = nodes[diag.0].tensor.data();
                    for (i, (o, v)) in buf!(a).iter_mut().zip(g).enumerate() {
                        *o += v * dv[i % c];
                    }
                }
                if needs(*diag) {
                    let av = nodes[a.0].tensor.data();
                    let db = buf!(diag);
                    for (i, v) in g.iter().enumerate() {
                        db[i % c] += v * av[i];
                    }
                }
            }
            Op::ScaleScalar { a, s } => {
                if needs(*a) {
                    let sv = nodes[s.0].tensor.data()[0];
                    for (o, v) in buf!(a).iter_mut().zip(g) {
                        *o += sv * v;
                    }
                }
                if needs(*s) {
                    let av = nodes[a.0].tensor.data();
                    buf!(s)[0] += g.iter().zip(av).map(|(v, x)| v * x).sum::<f64>();
                }
            }
            Op::ScaleConst { a, c } => {
                if needs(*a) {
                    let c = *c;
                    for (o, v) in buf!(a).iter_mut().zip(g) {
                        *o += c * v;
                    }
                }
            }
            Op::ApplyMask { a, mask } => {
                if needs(*a) {
                    for ((o, v), m) in buf!(a).iter_mut().zip(g).zip(mask) {
                        *o += v * m;
                    }
                }
            }
            Op::Softmax { a } => {
                if needs(*a) {
                    let n = out.last_dim();
                    let s = out.data();
                    let ab = buf!(a);
                    for (r, (gr, sr)) in g.chunks(n).zip(s.chunks(n)).enumerate() {
                        let dot: f64 = gr.iter().zip(sr).map(|(x, y)| x * y).sum();
                        for j in 0..n {
                            ab[r * n + j] += sr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { a, gamma, beta, eps } => {
                let d = nodes[a.0].tensor.last_dim();
                let x = nodes[a.0].tensor.data();
                let gv = nodes[gamma.0].tensor.data();
                let eps = *eps;
                if needs(*a) {
                    let ab = buf!(a);
                    for (r, (xr, gr)) in x.chunks(d).zip(g.chunks(d)).enumerate() {
                        let mean = xr.iter().sum::<f64>() / d as f64;
                        let var =
                            xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / math::sqrt(var + eps);
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let xh = (xr[j] - mean) * inv;
                            let dy = gr[j] * gv[j];
                            m1 += dy;
                            m2 += dy * xh;
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let xh = (xr[j] - mean) * inv;
                            let dy = gr[j] * gv[j];
                            ab[r * d + j] += inv * (dy - m1 - xh * m2);
                        }
                    }
                }
                if needs(*gamma) {
                    let gb = buf!(gamma);
                    for (xr, gr) in x.chunks(d).zip(g.chunks(d)) {
                        let mean = xr.iter().sum::<f64>() / d as f64;
                        let var =
                            xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / math::sqrt(var + eps);
                        for j in 0..d {
                            gb[j] += gr[j] * (xr[j] - mean) * inv;
                        }
                    }
                }
                if needs(*beta) {
                    let bb = buf!(beta);
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            bb[j] += gr[j];
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                if needs(*a) {
                    let x = nodes[a.0].tensor.data();
                    let y = out.data();
                    for (((o, v), &xv), &yv) in buf!(a).iter_mut().zip(g).zip(x).zip(y) {
                        // Phi(x) = y/x for x != 0 (y = x * Phi(x) from the
                        // forward pass); 0.5 at the origin.
                        let phi_big = if xv == 0.0 { 0.5 } else { yv / xv };
                        let phi_small = math::INV_SQRT_2PI * math::exp(-0.5 * xv * xv);
                        *o += v * (phi_big + xv * phi_small);
                    }
                }
            }
            Op::Transpose { a } => {
                if needs(*a) {
                    let (r, c) = (nodes[a.0].tensor.rows(), nodes[a.0].tensor.cols());
                    let ab = buf!(a);
                    for i in 0..c {
                        for j in 0..r {
                            ab[j * c + i] += g[i * r + j];
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if needs(*a) {
                    for (o, v) in buf!(a).iter_mut().zip(g) {
                        *o += v;
                    }
                }
            }
            Op::MeanRows { a } => {
                if needs(*a) {
                    let (r, c) = (nodes[a.0].tensor.rows(), nodes[a.0].tensor.cols());
                    let inv = 1.0 / r as f64;
                    let ab = buf!(a);
                    for i in 0..r {
                        for j in 0..c {
                            ab[i * c + j] += g[j] * inv;
                        }
                    }
                }
            }
            Op::MeanAll { a } => {
                if needs(*a) {
                    let inv = g[0] / nodes[a.0].tensor.numel() as f64;
                    for o in buf!(a).iter_mut() {
                        *o += inv;
                    }
                }
            }
            Op::SumAll { a } => {
                if needs(*a) {
                    let v = g[0];
                    for o in buf!(a).iter_mut() {
                        *o += v;
                    }
                }
            }
            Op::SliceRows { a, start } => {
                if needs(*a) {
                    let c = nodes[a.0].tensor.cols();
                    let off = start * c;
                    let ab = buf!(a);
                    for (i, v) in g.iter().enumerate() {
                        ab[off + i] += v;
                    }
                }
            }
            Op::SliceCols { a, start } => {
                if needs(*a) {
                    let c = nodes[a.0].tensor.cols();
                    let w = out.cols();
                    let start = *start;
                    let ab = buf!(a);
                    for i in 0..out.rows() {
                        for j in 0..w {
                            ab[i * c + start + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let numel = nodes[p.0].tensor.numel();
                    if needs(p) {
                        for (o, v) in buf!(p).iter_mut().zip(&g[off..off + numel]) {
                            *o += v;
                        }
                    }
                    off += numel;
                }
            }
            Op::ConcatCols { parts } => {
                let r = out.rows();
                let total = out.cols();
                let mut off = 0;
                for &p in parts {
                    let c = nodes[p.0].tensor.cols();
                    if needs(p) {
                        let pb = buf!(p);
                        for i in 0..r {
                            for j in 0..c {
                                pb[i * c + j] += g[i * total + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::MixHeads { a, mix } => {
                let h = nodes[mix.0].tensor.rows();
                let rc = nodes[a.0].tensor.numel() / h;
                let mv = nodes[mix.0].tensor.data();
                if needs(*a) {
                    let ab = buf!(a);
                    for gh in 0..h {
                        for hh in 0..h {
                            let w = mv[gh * h + hh];
                            if w == 0.0 {
                                continue;
                            }
                            for idx in 0..rc {
                                ab[hh * rc + idx] += w * g[gh * rc + idx];
                            }
                        }
                    }
                }
                if needs(*mix) {
                    let av = nodes[a.0].tensor.data();
                    let mb = buf!(mix);
                    for gh in 0..h {
                        for hh in 0..h {
                            let mut acc = 0.0;
                            for idx in 0..rc {
                                acc += g[gh * rc + idx] * av[hh * rc + idx];
                            }
                            mb[gh * h + hh] += acc;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, target } => {
                if needs(*logits) {
                    let x = nodes[logits.0].tensor.data();
                    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut p: Vec<f64> = x.iter().map(|v| math::exp(v - mx)).collect();
                    let sum: f64 = p.iter().sum();
                    for v in p.iter_mut() {
                        *v /= sum;
                    }
                    let scale = g[0];
                    for ((o, pv), tv) in buf!(logits).iter_mut().zip(&p).zip(target) {
                        *o += scale * (pv - tv);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedRng;

    fn mat(r: usize, c: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(r, c, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_case() {
        let mut t = Tape::new();
        let i = t.constant(mat(2, 2, &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let b = t.constant(mat(2, 2, &[3.0, 4.0, 5.0, 6.0])).unwrap();
        let o = t.matmul(i, b).unwrap();
        assert_eq!(t.value(o).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let mut t = Tape::new();
        let a = t.constant(mat(1, 2, &[1.0, 2.0])).unwrap();
        let b = t.constant(mat(2, 1, &[3.0, 4.0])).unwrap();
        let o = t.matmul(a, b).unwrap();
        assert_eq!(t.value(o).data(), &[11.0]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let b = t.constant(Tensor::zeros(vec![4, 2])).unwrap();
        match t.matmul(a, b).unwrap_err() {
            CoreError::ShapeMismatch { lhs, rhs, .. } => {
                assert!(lhs.contains("[2, 3]"));
                assert!(rhs.contains("[4, 2]"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softmax_symmetry() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![0.0; 4])).unwrap();
        let o = t.softmax(a).unwrap();
        for v in t.value(o).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_logit_does_not_overflow() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1000.0, 0.0])).unwrap();
        let o = t.softmax(a).unwrap();
        let v = t.value(o).data();
        assert!((v[0] - 1.0).abs() < 1e-12);
        assert!(v[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        // Independent route: exp/sum evaluated directly.
        let x = [1.0, 2.0, 3.0];
        let direct: Vec<f64> = {
            let exps: Vec<f64> = x.iter().map(|v| crate::math::exp(*v)).collect();
            let s: f64 = exps.iter().sum();
            exps.iter().map(|e| e / s).collect()
        };
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(x.to_vec())).unwrap();
        let o = t.softmax(a).unwrap();
        let got = t.value(o).data();
        let frozen = [0.090_030_573_170_380_46, 0.244_728_471_054_797_7, 0.665_240_955_774_821_9];
        for i in 0..3 {
            assert!((got[i] - direct[i]).abs() < 1e-15);
            assert!((got[i] - frozen[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = SeedRng::new(5, 7);
        let mut t = Tape::new();
        let a = t
            .constant(Tensor::from_vec(vec![6, 9], rng.normal_vec(54, 0.0, 3.0)).unwrap())
            .unwrap();
        let o = t.softmax(a).unwrap();
        for row in t.value(o).data().chunks(9) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn layer_norm_constant_vector_is_zeroed() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![5.0; 8])).unwrap();
        let g = t.constant(Tensor::vector(vec![1.0; 8])).unwrap();
        let b = t.constant(Tensor::vector(vec![0.0; 8])).unwrap();
        let o = t.layer_norm(a, g, b, 1e-6).unwrap();
        for v in t.value(o).data() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 3.0])).unwrap();
        let g = t.constant(Tensor::vector(vec![1.0, 1.0])).unwrap();
        let b = t.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let o = t.layer_norm(a, g, b, 1e-6).unwrap();
        let v = t.value(o).data();
        assert!((v[0] + 1.0).abs() < 1e-5);
        assert!((v[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_rejects_empty_axis() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 0])).unwrap();
        let g = t.constant(Tensor::zeros(vec![0])).unwrap();
        let b = t.constant(Tensor::zeros(vec![0])).unwrap();
        assert!(matches!(
            t.layer_norm(a, g, b, 1e-6),
            Err(CoreError::InvalidDimension { op: "layer_norm", .. })
        ));
    }

    #[test]
    fn gelu_at_zero_is_zero() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![0.0])).unwrap();
        let o = t.gelu(a).unwrap();
        assert_eq!(t.value(o).data()[0], 0.0);
    }

    #[test]
    fn scale_rows_identity_diagonal() {
        let mut rng = SeedRng::new(1, 7);
        let data = rng.normal_vec(12, 0.0, 1.0);
        let mut t = Tape::new();
        let a = t.constant(mat(3, 4, &data)).unwrap();
        let ones = t.constant(Tensor::vector(vec![1.0; 4])).unwrap();
        let o = t.scale_rows(a, ones).unwrap();
        assert_eq!(t.value(o).data(), data.as_slice());
    }

    #[test]
    fn dropout_mask_identity_in_eval_mode() {
        let mut rng = SeedRng::new(2, 7);
        let mask = dropout_mask(64, 0.5, &mut rng, false);
        assert!(mask.iter().all(|m| *m == 1.0));
    }

    #[test]
    fn dropout_mask_is_inverse_scaled() {
        let mut rng = SeedRng::new(2, 7);
        let p = 0.25;
        let mask = dropout_mask(100_000, p, &mut rng, true);
        let mean: f64 = mask.iter().sum::<f64>() / mask.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert!(mask.iter().all(|m| *m == 0.0 || (*m - 1.0 / (1.0 - p)).abs() < 1e-15));
    }

    #[test]
    fn nan_input_is_rejected() {
        let mut t = Tape::new();
        let err = t.constant(Tensor::vector(vec![f64::NAN])).unwrap_err();
        assert!(matches!(err, CoreError::NonFinite { .. }));
    }

    #[test]
    fn concat_slice_round_trip() {
        let mut t = Tape::new();
        let a = t.constant(mat(2, 3, &[1., 2., 3., 4., 5., 6.])).unwrap();
        let b = t.constant(mat(1, 3, &[7., 8., 9.])).unwrap();
        let cat = t.concat_rows(&[a, b]).unwrap();
        let back = t.slice_rows(cat, 2, 1).unwrap();
        assert_eq!(t.value(back).data(), &[7., 8., 9.]);

        let catc = t.concat_cols(&[a, a]).unwrap();
        let right = t.slice_cols(catc, 3, 3).unwrap();
        assert_eq!(t.value(right).data(), t.value(a).data());
    }

    #[test]
    fn mix_heads_identity_matrix_is_noop() {
        let mut rng = SeedRng::new(4, 7);
        let data = rng.normal_vec(2 * 3 * 4, 0.0, 1.0);
        let mut t = Tape::new();
        let a = t.constant(mat(6, 4, &data)).unwrap();
        let eye = t.constant(mat(2, 2, &[1., 0., 0., 1.])).unwrap();
        let o = t.mix_heads(a, eye).unwrap();
        assert_eq!(t.value(o).data(), data.as_slice());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut t = Tape::new();
        let logits = t.constant(Tensor::vector(vec![0.0; 4])).unwrap();
        let o = t.cross_entropy(logits, &[0.25; 4]).unwrap();
        assert!((t.value(o).data()[0] - crate::math::ln(4.0)).abs() < 1e-12);
    }

    #[test]
    fn backward_through_small_chain() {
        // loss = sum((a · b) ⊙ 1) for a = [[1,2]], b = [[3],[4]]
        let mut t = Tape::new();
        let a = t.leaf(mat(1, 2, &[1.0, 2.0]).with_grad()).unwrap();
        let b = t.leaf(mat(2, 1, &[3.0, 4.0]).with_grad()).unwrap();
        let o = t.matmul(a, b).unwrap();
        let loss = t.sum_all(o).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[3.0, 4.0]);
        assert_eq!(t.grad(b).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn forward_is_deterministic_for_fixed_seed() {
        let run = || {
            let mut rng = SeedRng::new(123, 7);
            let mut t = Tape::new();
            let x = t
                .constant(Tensor::from_vec(vec![4, 6], rng.normal_vec(24, 0.0, 1.0)).unwrap())
                .unwrap();
            let w = t
                .constant(Tensor::from_vec(vec![6, 6], rng.normal_vec(36, 0.0, 1.0)).unwrap())
                .unwrap();
            let h = t.matmul(x, w).unwrap();
            let g = t.gelu(h).unwrap();
            let s = t.softmax(g).unwrap();
            t.value(s).data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn tape_clear_resets_everything() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::scalar(2.0).with_grad()).unwrap();
        let l = t.sum_all(a).unwrap();
        t.backward(l).unwrap();
        assert!(t.grad(a).is_some());
        t.clear();
        assert!(t.is_empty());
    }
}
