//! Reverse-mode automatic differentiation on an eager tape.
//!
//! Nodes are appended in evaluation order, so insertion order is a valid
//! topological order and `backward` is a single reverse sweep. Values are
//! computed at node creation; every forward result is checked for
//! finiteness (NaN/Inf is an error state, never a silent value).

use crate::error::{DeluluError, Result};
use crate::numerics::tensor::Tensor;
use ndarray::linalg::general_mat_mul;
use ndarray::Array2;

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_B: f64 = 0.044715;
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct NodeId(pub usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul,
    Transpose,
    Conv1d { stride: usize },
    Add,
    AddBias,
    Scale(f64),
    Gelu,
    LayerNorm { eps: f64 },
    AffineCols,
    Softmax,
    LogSoftmax,
    MeanPool,
    Square,
    Sum,
    EmbedLookup { indices: Vec<usize> },
    L2Normalize,
    SliceCols { start: usize, len: usize },
    ConcatCols,
    Detach,
    MaskRows { rows: Vec<usize> },
    NllMasked { labels: Vec<usize>, rows: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Conv1d { .. } => "conv1d",
            Op::Add => "add",
            Op::AddBias => "add_bias",
            Op::Scale(_) => "scale",
            Op::Gelu => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::AffineCols => "affine_cols",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::MeanPool => "mean_pool",
            Op::Square => "square",
            Op::Sum => "sum",
            Op::EmbedLookup { .. } => "embedding_lookup",
            Op::L2Normalize => "l2_normalize",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols => "concat_cols",
            Op::Detach => "detach",
            Op::MaskRows { .. } => "mask_rows",
            Op::NllMasked { .. } => "nll_masked",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Eager compute tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> DeluluError {
    DeluluError::Shape { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Register a leaf tensor. `requires_grad` marks it as a parameter.
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> NodeId {
        let mut value = t;
        value.requires_grad = requires_grad;
        self.nodes.push(Node { op: Op::Leaf, inputs: vec![], value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.input(t, false)
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(DeluluError::Numeric(format!(
                "non-finite value produced by op {}",
                op.name()
            )));
        }
        let requires_grad = !matches!(op, Op::Detach)
            && inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        self.nodes.push(Node { op, inputs, value, requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    // ---- op builders -------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = Tensor::zeros(vec![ta.rows(), tb.cols()]);
        general_mat_mul(1.0, &ta.view2(), &tb.view2(), 0.0, &mut out.view2_mut());
        self.push(Op::MatMul, vec![a, b], out)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; r * c];
        let src = ta.data();
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], data)?;
        self.push(Op::Transpose, vec![a], out)
    }

    /// 1-D convolution, no padding. Input is (L, C_in) time-major, weight
    /// is (C_out, C_in, K), output (L_out, C_out) with
    /// L_out = floor((L - K)/stride) + 1.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, stride: usize) -> Result<NodeId> {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if tw.shape().len() != 3 || tx.cols() != tw.shape()[1] {
            return Err(shape_err("conv1d", tx, tw));
        }
        let (l, c_in) = (tx.rows(), tx.cols());
        let (c_out, k) = (tw.shape()[0], tw.shape()[2]);
        if l < k {
            return Err(DeluluError::Contract(format!(
                "conv1d: input length {l} shorter than kernel {k}"
            )));
        }
        let l_out = (l - k) / stride + 1;
        let col = im2col(tx.data(), l, c_in, k, stride, l_out);
        let w2 = ndarray::ArrayView2::from_shape((c_out, c_in * k), tw.data()).unwrap();
        let mut out = Tensor::zeros(vec![l_out, c_out]);
        general_mat_mul(1.0, &col.view(), &w2.t(), 0.0, &mut out.view2_mut());
        self.push(Op::Conv1d { stride }, vec![x, w], out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(Op::Add, vec![a, b], out)
    }

    /// Add a column vector to every row of a matrix.
    pub fn add_bias(&mut self, m: NodeId, b: NodeId) -> Result<NodeId> {
        let (tm, tb) = (&self.nodes[m.0].value, &self.nodes[b.0].value);
        if tm.cols() != tb.numel() {
            return Err(shape_err("add_bias", tm, tb));
        }
        let cols = tm.cols();
        let data = tm
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tb.data()[i % cols])
            .collect();
        let out = Tensor::new(tm.shape().to_vec(), data)?;
        self.push(Op::AddBias, vec![m, b], out)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| x * c).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(Op::Scale(c), vec![a], out)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| gelu_fwd(x)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(Op::Gelu, vec![a], out)
    }

    /// Row-wise layer normalization, no affine part. A constant row (zero
    /// variance) normalizes to all zeros thanks to the epsilon under the
    /// square root.
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &ta.data()[i * c..(i + 1) * c];
            let (mean, inv_std) = row_moments(row, eps);
            for j in 0..c {
                data[i * c + j] = (row[j] - mean) * inv_std;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(Op::LayerNorm { eps }, vec![a], out)
    }

    /// Per-column scale and shift: out[t][d] = x[t][d]*gain[d] + bias[d].
    pub fn affine_cols(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tg, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[gain.0].value,
            &self.nodes[bias.0].value,
        );
        if tx.cols() != tg.numel() || tx.cols() != tb.numel() {
            return Err(shape_err("affine_cols", tx, tg));
        }
        let c = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * tg.data()[i % c] + tb.data()[i % c])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(Op::AffineCols, vec![x, gain, bias], out)
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let out = Tensor::new(ta.shape().to_vec(), rowwise_softmax(ta, false))?;
        self.push(Op::Softmax, vec![a], out)
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let out = Tensor::new(ta.shape().to_vec(), rowwise_softmax(ta, true))?;
        self.push(Op::LogSoftmax, vec![a], out)
    }

    /// Mean over rows (time): (T, d) -> vector of d.
    pub fn mean_pool(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += ta.data()[i * c + j];
            }
        }
        for v in data.iter_mut() {
            *v /= r as f64;
        }
        let out = Tensor::vector(data);
        self.push(Op::MeanPool, vec![a], out)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| x * x).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(Op::Square, vec![a], out)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let out = Tensor::scalar(ta.data().iter().sum());
        self.push(Op::Sum, vec![a], out)
    }

    /// Row gather from an embedding table: (k, d) with n indices -> (n, d).
    pub fn embedding_lookup(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let tt = &self.nodes[table.0].value;
        let (k, d) = (tt.rows(), tt.cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(DeluluError::Contract(format!(
                "embedding_lookup: index {bad} out of range for table with {k} rows"
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&tt.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![indices.len(), d], data)?;
        self.push(Op::EmbedLookup { indices: indices.to_vec() }, vec![table], out)
    }

    /// Row-wise L2 normalization. A zero-norm row maps to zeros (logged).
    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &ta.data()[i * c..(i + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < NORM_EPS {
                log::warn!("l2_normalize: zero-norm row {i}, emitting zeros");
                continue;
            }
            for j in 0..c {
                data[i * c + j] = row[j] / n;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(Op::L2Normalize, vec![a], out)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let (r, c) = (ta.rows(), ta.cols());
        if start + len > c {
            return Err(DeluluError::Contract(format!(
                "slice_cols: [{start}, {}) out of range for {c} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&ta.data()[i * c + start..i * c + start + len]);
        }
        let out = Tensor::new(vec![r, len], data)?;
        self.push(Op::SliceCols { start, len }, vec![a], out)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(DeluluError::Contract("concat_cols: no inputs".into()));
        }
        let r = self.nodes[parts[0].0].value.rows();
        let mut total = 0;
        for &p in parts {
            let tp = &self.nodes[p.0].value;
            if tp.rows() != r {
                return Err(DeluluError::Contract(format!(
                    "concat_cols: row mismatch {} vs {r}",
                    tp.rows()
                )));
            }
            total += tp.cols();
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let tp = &self.nodes[p.0].value;
                let c = tp.cols();
                data.extend_from_slice(&tp.data()[i * c..(i + 1) * c]);
            }
        }
        let out = Tensor::new(vec![r, total], data)?;
        self.push(Op::ConcatCols, parts.to_vec(), out)
    }

    /// Identity forward, zero gradient backward (stop-gradient).
    pub fn detach(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.nodes[a.0].value.clone();
        self.push(Op::Detach, vec![a], out)
    }

    /// Replace the listed rows of a (T, d) matrix with a learned d-vector.
    pub fn mask_rows(&mut self, x: NodeId, rows: &[usize], v: NodeId) -> Result<NodeId> {
        let (tx, tv) = (&self.nodes[x.0].value, &self.nodes[v.0].value);
        let (r, c) = (tx.rows(), tx.cols());
        if tv.numel() != c {
            return Err(shape_err("mask_rows", tx, tv));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(DeluluError::Contract(format!(
                "mask_rows: row {bad} out of range for {r} rows"
            )));
        }
        let mut data = tx.data().to_vec();
        for &i in rows {
            data[i * c..(i + 1) * c].copy_from_slice(tv.data());
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(Op::MaskRows { rows: rows.to_vec() }, vec![x, v], out)
    }

    /// Mean negative log-likelihood over the selected rows of a
    /// log-probability matrix: -(1/|rows|) sum log_p[r][labels[r]].
    pub fn nll_masked(&mut self, log_p: NodeId, labels: &[usize], rows: &[usize]) -> Result<NodeId> {
        let tp = &self.nodes[log_p.0].value;
        let (t, k) = (tp.rows(), tp.cols());
        if labels.len() != t {
            return Err(DeluluError::Contract(format!(
                "nll_masked: {} labels for {t} rows",
                labels.len()
            )));
        }
        if rows.is_empty() {
            return Err(DeluluError::Contract("nll_masked: empty mask".into()));
        }
        for &r in rows {
            if r >= t || labels[r] >= k {
                return Err(DeluluError::Contract(format!(
                    "nll_masked: row {r} / label {} out of range ({t} x {k})",
                    if r < t { labels[r] } else { 0 }
                )));
            }
        }
        let s: f64 = rows.iter().map(|&r| -tp.data()[r * k + labels[r]]).sum();
        let out = Tensor::scalar(s / rows.len() as f64);
        self.push(
            Op::NllMasked { labels: labels.to_vec(), rows: rows.to_vec() },
            vec![log_p],
            out,
        )
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from a scalar loss node. Returns one optional gradient
    /// per node; gradients accumulate additively across fan-out, and nodes
    /// not on any path to the loss stay `None`.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Option<Tensor>>> {
        let lt = &self.nodes[loss.0].value;
        if !lt.is_scalar() {
            return Err(DeluluError::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape().to_vec(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if node.inputs.is_empty() || !node.requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let input_grads = self.op_backward(node, &g)?;
            for (slot, ig) in node.inputs.iter().zip(input_grads) {
                if !self.nodes[slot.0].requires_grad {
                    continue;
                }
                if let Some(ig) = ig {
                    match &mut grads[slot.0] {
                        Some(acc) => acc.add_assign(&ig)?,
                        none => *none = Some(ig),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    /// Gradient of a leaf, zero-filled when the leaf is unused by the loss.
    pub fn leaf_grad(&self, grads: &[Option<Tensor>], leaf: NodeId) -> Tensor {
        grads[leaf.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.nodes[leaf.0].value.shape().to_vec()))
    }

    fn op_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Detach => vec![None],
            Op::MatMul => {
                let (a, b) = (val(node.inputs[0]), val(node.inputs[1]));
                let mut da = Tensor::zeros(a.shape().to_vec());
                let mut db = Tensor::zeros(b.shape().to_vec());
                general_mat_mul(1.0, &g.view2(), &b.view2().t(), 0.0, &mut da.view2_mut());
                general_mat_mul(1.0, &a.view2().t(), &g.view2(), 0.0, &mut db.view2_mut());
                vec![Some(da), Some(db)]
            }
            Op::Transpose => {
                let a = val(node.inputs[0]);
                let (r, c) = (a.rows(), a.cols());
                let mut da = Tensor::zeros(a.shape().to_vec());
                for i in 0..c {
                    for j in 0..r {
                        da.data_mut()[j * c + i] = g.data()[i * r + j];
                    }
                }
                vec![Some(da)]
            }
            Op::Conv1d { stride } => {
                let (x, w) = (val(node.inputs[0]), val(node.inputs[1]));
                let (l, c_in) = (x.rows(), x.cols());
                let (c_out, k) = (w.shape()[0], w.shape()[2]);
                let l_out = (l - k) / stride + 1;
                let col = im2col(x.data(), l, c_in, k, *stride, l_out);
                // dW = gᵀ · col
                let mut dw = Tensor::zeros(w.shape().to_vec());
                {
                    let mut dw2 =
                        ndarray::ArrayViewMut2::from_shape((c_out, c_in * k), dw.data_mut())
                            .unwrap();
                    general_mat_mul(1.0, &g.view2().t(), &col.view(), 0.0, &mut dw2);
                }
                // dX = col2im(g · W2)
                let dx = if self.nodes[node.inputs[0].0].requires_grad {
                    let w2 = ndarray::ArrayView2::from_shape((c_out, c_in * k), w.data()).unwrap();
                    let mut dcol = Array2::<f64>::zeros((l_out, c_in * k));
                    general_mat_mul(1.0, &g.view2(), &w2, 0.0, &mut dcol.view_mut());
                    let mut dx = Tensor::zeros(x.shape().to_vec());
                    let dxd = dx.data_mut();
                    for t in 0..l_out {
                        for ci in 0..c_in {
                            for kk in 0..k {
                                dxd[(t * stride + kk) * c_in + ci] += dcol[(t, ci * k + kk)];
                            }
                        }
                    }
                    Some(dx)
                } else {
                    None
                };
                vec![dx, Some(dw)]
            }
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::AddBias => {
                let c = g.cols();
                let mut db = vec![0.0; c];
                for (i, v) in g.data().iter().enumerate() {
                    db[i % c] += v;
                }
                vec![Some(g.clone()), Some(Tensor::vector(db))]
            }
            Op::Scale(c) => {
                let mut da = g.clone();
                da.scale_assign(*c);
                vec![Some(da)]
            }
            Op::Gelu => {
                let a = val(node.inputs[0]);
                let data = a
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gy)| gy * gelu_bwd(x))
                    .collect();
                vec![Some(Tensor::new(a.shape().to_vec(), data)?)]
            }
            Op::LayerNorm { eps } => {
                let a = val(node.inputs[0]);
                let (r, c) = (a.rows(), a.cols());
                let mut da = Tensor::zeros(a.shape().to_vec());
                for i in 0..r {
                    let row = &a.data()[i * c..(i + 1) * c];
                    let grow = &g.data()[i * c..(i + 1) * c];
                    let (mean, inv_std) = row_moments(row, *eps);
                    let y: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    let g_mean = grow.iter().sum::<f64>() / c as f64;
                    let gy_mean = grow.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        da.data_mut()[i * c + j] = inv_std * (grow[j] - g_mean - y[j] * gy_mean);
                    }
                }
                vec![Some(da)]
            }
            Op::AffineCols => {
                let (x, gain) = (val(node.inputs[0]), val(node.inputs[1]));
                let c = x.cols();
                let mut dx = Tensor::zeros(x.shape().to_vec());
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for (i, gv) in g.data().iter().enumerate() {
                    dx.data_mut()[i] = gv * gain.data()[i % c];
                    dg[i % c] += gv * x.data()[i];
                    db[i % c] += gv;
                }
                vec![Some(dx), Some(Tensor::vector(dg)), Some(Tensor::vector(db))]
            }
            Op::Softmax => {
                let y = &node.value;
                let (r, c) = (y.rows(), y.cols());
                let mut da = Tensor::zeros(y.shape().to_vec());
                for i in 0..r {
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        da.data_mut()[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(da)]
            }
            Op::LogSoftmax => {
                let y = &node.value;
                let (r, c) = (y.rows(), y.cols());
                let mut da = Tensor::zeros(y.shape().to_vec());
                for i in 0..r {
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..c {
                        da.data_mut()[i * c + j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                vec![Some(da)]
            }
            Op::MeanPool => {
                let a = val(node.inputs[0]);
                let (r, c) = (a.rows(), a.cols());
                let mut da = Tensor::zeros(a.shape().to_vec());
                for i in 0..r {
                    for j in 0..c {
                        da.data_mut()[i * c + j] = g.data()[j] / r as f64;
                    }
                }
                vec![Some(da)]
            }
            Op::Square => {
                let a = val(node.inputs[0]);
                let data = a
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gy)| 2.0 * x * gy)
                    .collect();
                vec![Some(Tensor::new(a.shape().to_vec(), data)?)]
            }
            Op::Sum => {
                let a = val(node.inputs[0]);
                vec![Some(Tensor::full(a.shape().to_vec(), g.item()))]
            }
            Op::EmbedLookup { indices } => {
                let t = val(node.inputs[0]);
                let d = t.cols();
                let mut dt = Tensor::zeros(t.shape().to_vec());
                for (i, &idx) in indices.iter().enumerate() {
                    for j in 0..d {
                        dt.data_mut()[idx * d + j] += g.data()[i * d + j];
                    }
                }
                vec![Some(dt)]
            }
            Op::L2Normalize => {
                let a = val(node.inputs[0]);
                let y = &node.value;
                let (r, c) = (a.rows(), a.cols());
                let mut da = Tensor::zeros(a.shape().to_vec());
                for i in 0..r {
                    let row = &a.data()[i * c..(i + 1) * c];
                    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n < NORM_EPS {
                        continue; // zero-norm row: output and gradient are zero
                    }
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        da.data_mut()[i * c + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                vec![Some(da)]
            }
            Op::SliceCols { start, len } => {
                let a = val(node.inputs[0]);
                let (r, c) = (a.rows(), a.cols());
                let mut da = Tensor::zeros(a.shape().to_vec());
                for i in 0..r {
                    for j in 0..*len {
                        da.data_mut()[i * c + start + j] = g.data()[i * len + j];
                    }
                }
                vec![Some(da)]
            }
            Op::ConcatCols => {
                let r = node.value.rows();
                let total = node.value.cols();
                let mut out = Vec::with_capacity(node.inputs.len());
                let mut offset = 0;
                for &p in &node.inputs {
                    let tp = val(p);
                    let c = tp.cols();
                    let mut dp = Tensor::zeros(tp.shape().to_vec());
                    for i in 0..r {
                        for j in 0..c {
                            dp.data_mut()[i * c + j] = g.data()[i * total + offset + j];
                        }
                    }
                    offset += c;
                    out.push(Some(dp));
                }
                out
            }
            Op::MaskRows { rows } => {
                let x = val(node.inputs[0]);
                let c = x.cols();
                let mut dx = g.clone();
                let mut dv = vec![0.0; c];
                for &i in rows {
                    for j in 0..c {
                        dv[j] += dx.data()[i * c + j];
                        dx.data_mut()[i * c + j] = 0.0;
                    }
                }
                vec![Some(dx), Some(Tensor::vector(dv))]
            }
            Op::NllMasked { labels, rows } => {
                let p = val(node.inputs[0]);
                let k = p.cols();
                let mut dp = Tensor::zeros(p.shape().to_vec());
                let scale = -g.item() / rows.len() as f64;
                for &r in rows {
                    dp.data_mut()[r * k + labels[r]] += scale;
                }
                vec![Some(dp)]
            }
        })
    }
}

// ---- shared kernels ----------------------------------------------------

fn im2col(x: &[f64], _l: usize, c_in: usize, k: usize, stride: usize, l_out: usize) -> Array2<f64> {
    let mut col = Array2::<f64>::zeros((l_out, c_in * k));
    for t in 0..l_out {
        for ci in 0..c_in {
            for kk in 0..k {
                col[(t, ci * k + kk)] = x[(t * stride + kk) * c_in + ci];
            }
        }
    }
    col
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let c = row.len() as f64;
    let mean = row.iter().sum::<f64>() / c;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
    (mean, 1.0 / (var + eps).sqrt())
}

fn rowwise_softmax(t: &Tensor, log: bool) -> Vec<f64> {
    let (r, c) = (t.rows(), t.cols());
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        let row = &t.data()[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &v in row {
            z += (v - max).exp();
        }
        let lz = z.ln() + max;
        for j in 0..c {
            data[i * c + j] = if log { row[j] - lz } else { (row[j] - lz).exp() };
        }
    }
    data
}

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_A * (x + GELU_B * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_A * (x + GELU_B * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_A * (1.0 + 3.0 * GELU_B * x * x)
}
