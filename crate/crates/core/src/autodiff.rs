//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation whose inputs include a tracked
//! [`Var`]. Operations are appended in execution order, so the record is
//! topologically sorted by construction; [`Tape::backward`] walks it once in
//! reverse and accumulates gradients into the leaves.
//!
//! Values are shared through `Arc`, which lets parameter stores hand their
//! tensors to a tape without copying. A tape built with [`Tape::no_grad`]
//! records nothing, so intermediate values are freed as soon as the last
//! `Var` referencing them is dropped.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};

pub type NodeId = usize;

/// Floor applied to probabilities before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Additive attention bias that drives a softmax weight to exactly zero.
pub const MASKED: f64 = -1e9;

/// A tensor value together with its identity on a tape.
#[derive(Clone, Debug)]
pub struct Var {
    value: Arc<Tensor>,
    node: Option<NodeId>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shared(&self) -> Arc<Tensor> {
        Arc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Scalar value of a single-element variable.
    pub fn item(&self) -> f64 {
        self.value.item()
    }
}

#[derive(Debug)]
enum OpKind {
    MatMul { a: Arc<Tensor>, b: Arc<Tensor> },
    Transpose { rows: usize, cols: usize },
    Add,
    Sub,
    Mul { a: Arc<Tensor>, b: Arc<Tensor> },
    AddBias { cols: usize },
    Scale(f64),
    Identity,
    MulConst(Arc<Tensor>),
    Gelu(Arc<Tensor>),
    Sigmoid(Arc<Tensor>),
    Softmax { y: Arc<Tensor>, len: usize, inner: usize },
    LayerNorm { xhat: Vec<f64>, inv_std: Vec<f64>, gain: Arc<Tensor> },
    CrossEntropy { probs: Vec<f64>, targets: Vec<Option<usize>>, count: usize },
    BceWithLogits { sig: Vec<f64>, targets: Arc<Tensor> },
    Sum,
    Mean,
    GatherRows { idx: Vec<usize>, src_rows: usize },
    ReplaceRows { rows: Vec<usize> },
    SliceCols { start: usize, cols: usize },
    ConcatCols { widths: Vec<usize> },
}

#[derive(Debug)]
struct Op {
    out: NodeId,
    out_len: usize,
    inputs: Vec<Option<NodeId>>,
    input_shapes: Vec<Vec<usize>>,
    kind: OpKind,
}

/// Operation record for one forward pass.
#[derive(Debug)]
pub struct Tape {
    grad_enabled: bool,
    next_node: Cell<NodeId>,
    ops: RefCell<Vec<Op>>,
    leaf_shapes: RefCell<HashMap<NodeId, Vec<usize>>>,
    grads: RefCell<HashMap<NodeId, Tensor>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            grad_enabled: true,
            next_node: Cell::new(0),
            ops: RefCell::new(Vec::new()),
            leaf_shapes: RefCell::new(HashMap::new()),
            grads: RefCell::new(HashMap::new()),
        }
    }

    /// A tape that never records, for inference.
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Number of recorded operations.
    pub fn len(&self) -> usize {
        self.ops.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn fresh_node(&self) -> NodeId {
        let id = self.next_node.get();
        self.next_node.set(id + 1);
        id
    }

    /// A differentiable input. Untracked on a `no_grad` tape.
    pub fn leaf(&self, value: impl Into<Arc<Tensor>>) -> Var {
        let value = value.into();
        let node = self.grad_enabled.then(|| {
            let id = self.fresh_node();
            self.leaf_shapes.borrow_mut().insert(id, value.shape().to_vec());
            id
        });
        Var { value, node }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: impl Into<Arc<Tensor>>) -> Var {
        Var {
            value: value.into(),
            node: None,
        }
    }

    fn record(&self, inputs: &[&Var], value: Tensor, kind: impl FnOnce() -> OpKind) -> Var {
        self.record_with(inputs, value, |_| kind())
    }

    /// Like `record`, for rules that keep the op's own output.
    fn record_with(
        &self,
        inputs: &[&Var],
        value: Tensor,
        kind: impl FnOnce(&Arc<Tensor>) -> OpKind,
    ) -> Var {
        let value = Arc::new(value);
        let tracked = self.grad_enabled && inputs.iter().any(|v| v.is_tracked());
        if !tracked {
            return Var { value, node: None };
        }
        let out = self.fresh_node();
        self.ops.borrow_mut().push(Op {
            out,
            out_len: value.len(),
            inputs: inputs.iter().map(|v| v.node).collect(),
            input_shapes: inputs.iter().map(|v| v.shape().to_vec()).collect(),
            kind: kind(&value),
        });
        Var {
            value,
            node: Some(out),
        }
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, var: &Var) -> Option<Tensor> {
        let node = var.node?;
        self.grads.borrow().get(&node).cloned()
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }

    // ── forward operations ───────────────────────────────────────────

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        let (m, k) = a.value.dims2()?;
        let (k2, n) = b.value.dims2()?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(a.value.data(), b.value.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.record(&[a, b], value, || OpKind::MatMul {
            a: a.shared(),
            b: b.shared(),
        }))
    }

    pub fn transpose(&self, x: &Var) -> Result<Var> {
        let (rows, cols) = x.value.dims2()?;
        let src = x.value.data();
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        let value = Tensor::new(vec![cols, rows], out)?;
        Ok(self.record(&[x], value, || OpKind::Transpose { rows, cols }))
    }

    fn same_shape(op: &'static str, a: &Var, b: &Var) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::Shape {
                op,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(a: &Var, b: &Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = a
            .value
            .data()
            .iter()
            .zip(b.value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(a.shape().to_vec(), data).expect("shape checked")
    }

    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        Self::same_shape("add", a, b)?;
        Ok(self.record(&[a, b], Self::zip_with(a, b, |x, y| x + y), || OpKind::Add))
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        Self::same_shape("sub", a, b)?;
        Ok(self.record(&[a, b], Self::zip_with(a, b, |x, y| x - y), || OpKind::Sub))
    }

    /// Elementwise product.
    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        Self::same_shape("mul", a, b)?;
        Ok(self.record(&[a, b], Self::zip_with(a, b, |x, y| x * y), || OpKind::Mul {
            a: a.shared(),
            b: b.shared(),
        }))
    }

    /// Adds a vector to every row (last axis) of `x`.
    pub fn add_bias(&self, x: &Var, bias: &Var) -> Result<Var> {
        let cols = x.value.last_dim();
        if bias.shape() != [cols] {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: x.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let b = bias.value.data();
        let data = x
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % cols])
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.record(&[x, bias], value, || OpKind::AddBias { cols }))
    }

    pub fn scale(&self, x: &Var, c: f64) -> Var {
        self.record(&[x], x.value.map(|v| v * c), || OpKind::Scale(c))
    }

    /// Adds a non-differentiable tensor of the same shape.
    pub fn add_const(&self, x: &Var, c: &Tensor) -> Result<Var> {
        if x.shape() != c.shape() {
            return Err(Error::Shape {
                op: "add_const",
                lhs: x.shape().to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        let data = x.value.data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.record(&[x], value, || OpKind::Identity))
    }

    /// Multiplies elementwise by a non-differentiable tensor of the same shape.
    pub fn mul_const(&self, x: &Var, c: &Arc<Tensor>) -> Result<Var> {
        if x.shape() != c.shape() {
            return Err(Error::Shape {
                op: "mul_const",
                lhs: x.shape().to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        let data = x.value.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.record(&[x], value, || OpKind::MulConst(Arc::clone(c))))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, x: &Var) -> Var {
        let value = x.value.map(|v| {
            let u = GELU_C * (v + 0.044715 * v * v * v);
            0.5 * v * (1.0 + u.tanh())
        });
        self.record(&[x], value, || OpKind::Gelu(x.shared()))
    }

    pub fn sigmoid(&self, x: &Var) -> Var {
        let value = x.value.map(sigmoid);
        self.record_with(&[x], value, |y| OpKind::Sigmoid(Arc::clone(y)))
    }

    /// Softmax along `axis`, with max-subtraction per slice.
    pub fn softmax(&self, x: &Var, axis: usize) -> Result<Var> {
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = x.value.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let at = |a: usize| base + a * inner;
                let max = (0..len).map(|a| src[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for a in 0..len {
                    let e = (src[at(a)] - max).exp();
                    out[at(a)] = e;
                    total += e;
                }
                for a in 0..len {
                    out[at(a)] /= total;
                }
            }
        }
        let value = Tensor::new(shape.to_vec(), out)?;
        Ok(self.record_with(&[x], value, |y| OpKind::Softmax {
            y: Arc::clone(y),
            len,
            inner,
        }))
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&self, x: &Var, gain: &Var, bias: &Var, eps: f64) -> Result<Var> {
        let cols = x.value.last_dim();
        if gain.shape() != [cols] || bias.shape() != [cols] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let src = x.value.data();
        let rows = src.len() / cols;
        let g = gain.value.data();
        let b = bias.value.data();
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.record(&[x, gain, bias], value, || OpKind::LayerNorm {
            xhat,
            inv_std,
            gain: gain.shared(),
        }))
    }

    /// Mean negative log-softmax of `logits[n×V]` at the target classes,
    /// skipping positions whose target equals `ignore_index`.
    pub fn cross_entropy(&self, logits: &Var, targets: &[usize], ignore_index: usize) -> Result<Var> {
        let (n, vocab) = logits.value.dims2()?;
        if targets.len() != n {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: logits.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let src = logits.value.data();
        let mut probs = vec![0.0; n * vocab];
        let mut kept = Vec::with_capacity(n);
        let mut total = 0.0;
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &src[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for c in 0..vocab {
                probs[r * vocab + c] = (row[c] - max).exp() / z;
            }
            if t == ignore_index {
                kept.push(None);
                continue;
            }
            if t >= vocab {
                return Err(Error::contract(format!(
                    "target {t} outside vocabulary of {vocab}"
                )));
            }
            let log_p = (row[t] - max - z.ln()).max(LOG_FLOOR.ln());
            total -= log_p;
            count += 1;
            kept.push(Some(t));
        }
        if count == 0 {
            return Err(Error::UndefinedLoss(
                "every target position is ignored".into(),
            ));
        }
        let value = Tensor::scalar(total / count as f64);
        Ok(self.record(&[logits], value, || OpKind::CrossEntropy {
            probs,
            targets: kept,
            count,
        }))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `targets`.
    pub fn bce_with_logits(&self, logits: &Var, targets: &Arc<Tensor>) -> Result<Var> {
        if logits.shape() != targets.shape() {
            return Err(Error::Shape {
                op: "bce_with_logits",
                lhs: logits.shape().to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        let z = logits.value.data();
        let t = targets.data();
        let total: f64 = z
            .iter()
            .zip(t)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let sig: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::scalar(total / z.len() as f64);
        Ok(self.record(&[logits], value, || OpKind::BceWithLogits {
            sig,
            targets: Arc::clone(targets),
        }))
    }

    pub fn sum(&self, x: &Var) -> Var {
        let value = Tensor::scalar(x.value.data().iter().sum());
        self.record(&[x], value, || OpKind::Sum)
    }

    pub fn mean(&self, x: &Var) -> Var {
        let n = x.value.len() as f64;
        let value = Tensor::scalar(x.value.data().iter().sum::<f64>() / n);
        self.record(&[x], value, || OpKind::Mean)
    }

    /// Selects rows of a matrix by index (embedding lookup, masked-position picks).
    pub fn gather_rows(&self, x: &Var, idx: &[usize]) -> Result<Var> {
        let (src_rows, cols) = x.value.dims2()?;
        if idx.is_empty() {
            return Err(Error::contract("gather_rows with no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= src_rows) {
            return Err(Error::contract(format!(
                "row index {bad} out of range for {src_rows} rows"
            )));
        }
        let src = x.value.data();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::new(vec![idx.len(), cols], out)?;
        Ok(self.record(&[x], value, || OpKind::GatherRows {
            idx: idx.to_vec(),
            src_rows,
        }))
    }

    /// Overwrites the listed rows of `x` with the vector `v`.
    pub fn replace_rows(&self, x: &Var, rows: &[usize], v: &Var) -> Result<Var> {
        let (n, cols) = x.value.dims2()?;
        if v.shape() != [cols] {
            return Err(Error::Shape {
                op: "replace_rows",
                lhs: x.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::contract(format!("row {bad} out of range for {n} rows")));
        }
        let mut out = x.value.data().to_vec();
        for &r in rows {
            out[r * cols..(r + 1) * cols].copy_from_slice(v.value.data());
        }
        let value = Tensor::new(vec![n, cols], out)?;
        Ok(self.record(&[x, v], value, || OpKind::ReplaceRows {
            rows: rows.to_vec(),
        }))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&self, x: &Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = x.value.dims2()?;
        if len == 0 || start + len > cols {
            return Err(Error::contract(format!(
                "column slice {start}..{} out of range for {cols} columns",
                start + len
            )));
        }
        let src = x.value.data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::new(vec![rows, len], out)?;
        Ok(self.record(&[x], value, || OpKind::SliceCols { start, cols }))
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let rows = first.value.dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = p.value.dims2()?;
            if r != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.value.data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(vec![rows, total], out)?;
        let refs: Vec<&Var> = parts.iter().collect();
        Ok(self.record(&refs, value, || OpKind::ConcatCols { widths }))
    }

    /// Mean squared error between two equally shaped values.
    pub fn mse(&self, pred: &Var, target: &Var) -> Result<Var> {
        let diff = self.sub(pred, target)?;
        let sq = self.mul(&diff, &diff)?;
        Ok(self.mean(&sq))
    }

    // ── reverse pass ─────────────────────────────────────────────────

    /// Propagates d`loss` back through the record and adds the result to
    /// every reached leaf's accumulated gradient.
    pub fn backward(&self, loss: &Var) -> Result<()> {
        if !loss.value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let root = loss
            .node
            .ok_or_else(|| Error::contract("loss is not recorded on this tape"))?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.next_node.get()];
        grads[root] = Some(vec![1.0]);

        let ops = self.ops.borrow();
        for op in ops.iter().rev() {
            let Some(g_out) = grads[op.out].take() else {
                continue;
            };
            debug_assert_eq!(g_out.len(), op.out_len);
            let input_grads = op_backward(op, &g_out);
            for (input, g) in op.inputs.iter().zip(input_grads) {
                if let (Some(id), Some(g)) = (input, g) {
                    accumulate(&mut grads[*id], g);
                }
            }
        }

        // Op outputs were consumed above, so whatever remains belongs to leaves.
        let shapes = self.leaf_shapes.borrow();
        let mut store = self.grads.borrow_mut();
        for (id, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            match store.get_mut(&id) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                None => {
                    let shape = shapes.get(&id).cloned().unwrap_or_else(|| vec![g.len()]);
                    store.insert(id, Tensor::new(shape, g)?);
                }
            }
        }
        Ok(())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Local gradient rules. Returns one optional gradient per input.
fn op_backward(op: &Op, g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let want = |i: usize| op.inputs[i].is_some();
    match &op.kind {
        OpKind::MatMul { a, b } => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let da = want(0).then(|| {
                let mut da = vec![0.0; m * k];
                matmul_nt_into(g, b.data(), &mut da, m, n, k);
                da
            });
            let db = want(1).then(|| {
                let mut db = vec![0.0; k * n];
                matmul_tn_into(a.data(), g, &mut db, m, k, n);
                db
            });
            vec![da, db]
        }
        OpKind::Transpose { rows, cols } => {
            // g is [cols×rows]
            let mut dx = vec![0.0; rows * cols];
            for j in 0..*cols {
                for i in 0..*rows {
                    dx[i * cols + j] = g[j * rows + i];
                }
            }
            vec![Some(dx)]
        }
        OpKind::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
        OpKind::Sub => vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())],
        OpKind::Mul { a, b } => {
            let da = want(0).then(|| g.iter().zip(b.data()).map(|(g, b)| g * b).collect());
            let db = want(1).then(|| g.iter().zip(a.data()).map(|(g, a)| g * a).collect());
            vec![da, db]
        }
        OpKind::AddBias { cols } => {
            let db = want(1).then(|| {
                let mut db = vec![0.0; *cols];
                for (i, v) in g.iter().enumerate() {
                    db[i % cols] += v;
                }
                db
            });
            vec![Some(g.to_vec()), db]
        }
        OpKind::Scale(c) => vec![Some(g.iter().map(|v| v * c).collect())],
        OpKind::Identity => vec![Some(g.to_vec())],
        OpKind::MulConst(c) => vec![Some(g.iter().zip(c.data()).map(|(g, c)| g * c).collect())],
        OpKind::Gelu(x) => {
            let dx = g
                .iter()
                .zip(x.data())
                .map(|(g, &v)| {
                    let t = (GELU_C * (v + 0.044715 * v * v * v)).tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                    g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                })
                .collect();
            vec![Some(dx)]
        }
        OpKind::Sigmoid(y) => {
            let dx = g.iter().zip(y.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
            vec![Some(dx)]
        }
        OpKind::Softmax { y, len, inner } => {
            let y = y.data();
            let mut dx = vec![0.0; y.len()];
            let outer = y.len() / (len * inner);
            for o in 0..outer {
                for i in 0..*inner {
                    let base = o * len * inner + i;
                    let dot: f64 = (0..*len).map(|a| g[base + a * inner] * y[base + a * inner]).sum();
                    for a in 0..*len {
                        let p = base + a * inner;
                        dx[p] = y[p] * (g[p] - dot);
                    }
                }
            }
            vec![Some(dx)]
        }
        OpKind::LayerNorm { xhat, inv_std, gain } => {
            let cols = gain.len();
            let rows = inv_std.len();
            let gn = gain.data();
            let mut dx = vec![0.0; xhat.len()];
            let mut dgain = vec![0.0; cols];
            let mut dbias = vec![0.0; cols];
            for r in 0..rows {
                let off = r * cols;
                let mut sum_d = 0.0;
                let mut sum_dx = 0.0;
                for c in 0..cols {
                    let dy = g[off + c];
                    dgain[c] += dy * xhat[off + c];
                    dbias[c] += dy;
                    let dh = dy * gn[c];
                    sum_d += dh;
                    sum_dx += dh * xhat[off + c];
                }
                let nf = cols as f64;
                for c in 0..cols {
                    let dh = g[off + c] * gn[c];
                    dx[off + c] = inv_std[r] / nf * (nf * dh - sum_d - xhat[off + c] * sum_dx);
                }
            }
            vec![Some(dx), Some(dgain), Some(dbias)]
        }
        OpKind::CrossEntropy { probs, targets, count } => {
            let scale = g[0] / *count as f64;
            let vocab = probs.len() / targets.len();
            let mut dx = vec![0.0; probs.len()];
            for (r, t) in targets.iter().enumerate() {
                let Some(t) = t else { continue };
                for c in 0..vocab {
                    let onehot = if c == *t { 1.0 } else { 0.0 };
                    dx[r * vocab + c] = (probs[r * vocab + c] - onehot) * scale;
                }
            }
            vec![Some(dx)]
        }
        OpKind::BceWithLogits { sig, targets } => {
            let scale = g[0] / sig.len() as f64;
            let dx = sig.iter().zip(targets.data()).map(|(s, t)| (s - t) * scale).collect();
            vec![Some(dx)]
        }
        OpKind::Sum => vec![Some(vec![g[0]; input_len(op, 0)])],
        OpKind::Mean => {
            let n = input_len(op, 0);
            vec![Some(vec![g[0] / n as f64; n])]
        }
        OpKind::GatherRows { idx, src_rows } => {
            let cols = g.len() / idx.len();
            let mut dx = vec![0.0; src_rows * cols];
            for (k, &i) in idx.iter().enumerate() {
                for c in 0..cols {
                    dx[i * cols + c] += g[k * cols + c];
                }
            }
            vec![Some(dx)]
        }
        OpKind::ReplaceRows { rows } => {
            let cols = op.input_shapes[1][0];
            let mut dx = g.to_vec();
            let mut dv = vec![0.0; cols];
            let mut seen = vec![false; g.len() / cols];
            for &r in rows {
                if seen[r] {
                    continue;
                }
                seen[r] = true;
                for c in 0..cols {
                    dv[c] += g[r * cols + c];
                    dx[r * cols + c] = 0.0;
                }
            }
            vec![Some(dx), Some(dv)]
        }
        OpKind::SliceCols { start, cols } => {
            let len = op.out_len / op.input_shapes[0][0];
            let rows = op.input_shapes[0][0];
            let mut dx = vec![0.0; rows * cols];
            for r in 0..rows {
                dx[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
            }
            vec![Some(dx)]
        }
        OpKind::ConcatCols { widths } => {
            let total: usize = widths.iter().sum();
            let rows = g.len() / total;
            let mut out: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(rows * w)).collect();
            for r in 0..rows {
                let mut off = r * total;
                for (p, &w) in widths.iter().enumerate() {
                    out[p].extend_from_slice(&g[off..off + w]);
                    off += w;
                }
            }
            out.into_iter().map(Some).collect()
        }
    }
}

fn input_len(op: &Op, i: usize) -> usize {
    op.input_shapes[i].iter().product()
}
