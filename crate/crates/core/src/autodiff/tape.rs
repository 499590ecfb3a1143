//! Reverse-mode automatic differentiation over whole tensors.
//!
//! A `Tape` is an append-only arena of nodes. Each op computes its value
//! eagerly on insertion and records its parents; `backward` walks the arena
//! in reverse, accumulating gradients. Insertion order is already a
//! topological order, so no explicit sort is needed.
//!
//! Parameters are interned per `(set, name)` key: binding the same parameter
//! twice returns the same node, so fan-out gradients accumulate naturally.

use super::tensor::{matmul, matmul_ta, matmul_tb, Tensor};
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Masked logits are set to this instead of a true minus infinity so that
/// downstream arithmetic stays NaN-free while softmax still assigns them
/// exactly zero probability.
pub const NEG_MASK: f64 = f64::MIN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `aᵀ @ b`
    MatMulTA(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Divide each row of `x` by the matching entry of a column vector.
    DivCol(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    /// Add a `1 x d` row to every row of `x`.
    AddRow(NodeId, NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    MeanRows(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    Row(NodeId, usize),
    Entry(NodeId, usize),
    /// Contiguous flat-index range as a `1 x len` row.
    SliceFlat(NodeId, usize),
    ConcatCols(NodeId, NodeId),
    /// Concatenate flattened values into a `1 x (a+b)` row.
    ConcatFlat(NodeId, NodeId),
    Reshape(NodeId),
    /// Replace masked rows with `NEG_MASK`; their gradient is zero.
    MaskRowsNeg(NodeId, Vec<bool>),
    /// log(sum(exp(x))) over all entries, max-subtracted.
    LogSumExp(NodeId),
    /// Per-row normalization to zero mean / unit variance (no affine part).
    LayerNorm(NodeId, f64),
    /// Elementwise multiply by a fixed dropout mask (entries 0 or 1/(1-p)).
    Dropout(NodeId, Vec<f64>),
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<(u8, String), NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self { nodes: Vec::with_capacity(n), grads: Vec::new(), params: BTreeMap::new() }
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
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

    /// Gradient of the last `backward` target w.r.t. node `id`, if reached.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Inserts a constant leaf (gradients flow into it but are discarded).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Interns a parameter leaf under `(set, name)`. Repeated binds of the
    /// same key return the original node so gradients accumulate.
    pub fn param(&mut self, set: u8, name: &str, value: &Tensor) -> NodeId {
        if let Some(&id) = self.params.get(&(set, name.to_string())) {
            return id;
        }
        let id = self.push(Op::Leaf, value.clone());
        self.params.insert((set, name.to_string()), id);
        id
    }

    /// All parameter bindings of a set, in name order.
    pub fn param_bindings(&self, set: u8) -> Vec<(String, NodeId)> {
        self.params
            .iter()
            .filter(|((s, _), _)| *s == set)
            .map(|((_, n), &id)| (n.clone(), id))
            .collect()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(self.value(a), self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn matmul_ta(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul_ta(self.value(a), self.value(b));
        self.push(Op::MatMulTA(a, b), v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        debug_assert!(va.same_shape(vb));
        let mut v = va.clone();
        v.add_assign(vb);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        debug_assert!(va.same_shape(vb));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let v = Tensor::new(va.shape().to_vec(), data).unwrap();
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        debug_assert!(va.same_shape(vb));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let v = Tensor::new(va.shape().to_vec(), data).unwrap();
        self.push(Op::Mul(a, b), v)
    }

    pub fn div_col(&mut self, x: NodeId, den: NodeId) -> NodeId {
        let (vx, vd) = (self.value(x), self.value(den));
        debug_assert_eq!(vd.cols(), 1);
        debug_assert_eq!(vx.rows(), vd.rows());
        let cols = vx.cols();
        let mut v = vx.clone();
        for r in 0..vx.rows() {
            let d = vd.get(r, 0);
            for c in 0..cols {
                v.set(r, c, vx.get(r, c) / d);
            }
        }
        self.push(Op::DivCol(x, den), v)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut v = self.value(x).clone();
        v.scale_assign(c);
        self.push(Op::Scale(x, c), v)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut v = self.value(x).clone();
        v.data_mut().iter_mut().for_each(|a| *a += c);
        self.push(Op::AddScalar(x), v)
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let (vx, vr) = (self.value(x), self.value(row));
        debug_assert_eq!(vr.rows(), 1);
        debug_assert_eq!(vx.cols(), vr.cols());
        let mut v = vx.clone();
        for r in 0..vx.rows() {
            for c in 0..vx.cols() {
                v.set(r, c, vx.get(r, c) + vr.get(0, c));
            }
        }
        self.push(Op::AddRow(x, row), v)
    }

    /// `x - repeat(row)` over all rows.
    pub fn sub_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let neg = self.scale(row, -1.0);
        self.add_row(x, neg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let v = Tensor::new(self.value(x).shape().to_vec(), data).unwrap();
        self.push(Op::Relu(x), v)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).data().iter().map(|&v| softplus(v)).collect();
        let v = Tensor::new(self.value(x).shape().to_vec(), data).unwrap();
        self.push(Op::Softplus(x), v)
    }

    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let (n, d) = (vx.rows(), vx.cols());
        let mut out = Tensor::zeros(1, d);
        for r in 0..n {
            for c in 0..d {
                out.data_mut()[c] += vx.get(r, c) / n as f64;
            }
        }
        self.push(Op::MeanRows(x), out)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Op::SumAll(x), Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let s: f64 = vx.data().iter().sum::<f64>() / vx.len() as f64;
        self.push(Op::MeanAll(x), Tensor::scalar(s))
    }

    pub fn row(&mut self, x: NodeId, r: usize) -> NodeId {
        let v = Tensor::from_flat(self.value(x).row_slice(r).to_vec());
        self.push(Op::Row(x, r), v)
    }

    pub fn entry(&mut self, x: NodeId, flat: usize) -> NodeId {
        let v = Tensor::scalar(self.value(x).data()[flat]);
        self.push(Op::Entry(x, flat), v)
    }

    pub fn slice_flat(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = Tensor::from_flat(self.value(x).data()[start..start + len].to_vec());
        self.push(Op::SliceFlat(x, start), v)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        debug_assert_eq!(va.rows(), vb.rows());
        let (n, ca, cb) = (va.rows(), va.cols(), vb.cols());
        let mut out = Tensor::zeros(n, ca + cb);
        for r in 0..n {
            for c in 0..ca {
                out.set(r, c, va.get(r, c));
            }
            for c in 0..cb {
                out.set(r, ca + c, vb.get(r, c));
            }
        }
        self.push(Op::ConcatCols(a, b), out)
    }

    pub fn concat_flat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        self.push(Op::ConcatFlat(a, b), Tensor::from_flat(data))
    }

    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> NodeId {
        let v = self.value(x).reshaped(rows, cols).expect("reshape size mismatch");
        self.push(Op::Reshape(x), v)
    }

    pub fn mask_rows_neg(&mut self, x: NodeId, mask: &[bool]) -> NodeId {
        let vx = self.value(x);
        debug_assert_eq!(vx.rows(), mask.len());
        let mut v = vx.clone();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                for c in 0..vx.cols() {
                    v.set(r, c, NEG_MASK);
                }
            }
        }
        self.push(Op::MaskRowsNeg(x, mask.to_vec()), v)
    }

    pub fn logsumexp(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let m = vx.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = vx.data().iter().map(|&v| (v - m).exp()).sum();
        self.push(Op::LogSumExp(x), Tensor::scalar(m + s.ln()))
    }

    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> NodeId {
        let vx = self.value(x);
        let (n, d) = (vx.rows(), vx.cols());
        let mut out = Tensor::zeros(n, d);
        for r in 0..n {
            let row = vx.row_slice(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..d {
                out.set(r, c, (row[c] - mean) * inv);
            }
        }
        self.push(Op::LayerNorm(x, eps), out)
    }

    pub fn dropout(&mut self, x: NodeId, mask: Vec<f64>) -> NodeId {
        let vx = self.value(x);
        debug_assert_eq!(vx.len(), mask.len());
        let data = vx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let v = Tensor::new(vx.shape().to_vec(), data).unwrap();
        self.push(Op::Dropout(x, mask), v)
    }

    /// Backpropagates from a scalar node, filling per-node gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::InvalidInput("backward target must be a scalar".into()));
        }
        if !lv.item().is_finite() {
            return Err(Error::TrainingDivergence("backward target is non-finite".into()));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = self.grads[idx].take() else { continue };
            // Put the gradient back for callers; continue propagating from a copy.
            self.grads[idx] = Some(g.clone());
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = matmul_tb(&g, self.value(b));
                    let db = matmul_ta(self.value(a), &g);
                    self.accum(a, da);
                    self.accum(b, db);
                }
                Op::MatMulTA(a, b) => {
                    // c = aᵀb: da = b gᵀ, db = a g
                    let da = matmul_tb(self.value(b), &g);
                    let db = matmul(self.value(a), &g);
                    self.accum(a, da);
                    self.accum(b, db);
                }
                Op::Add(a, b) => {
                    self.accum(a, g.clone());
                    self.accum(b, g);
                }
                Op::Sub(a, b) => {
                    let mut neg = g.clone();
                    neg.scale_assign(-1.0);
                    self.accum(a, g);
                    self.accum(b, neg);
                }
                Op::Mul(a, b) => {
                    let da_data: Vec<f64> =
                        g.data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
                    let db_data: Vec<f64> =
                        g.data().iter().zip(self.value(a).data()).map(|(x, y)| x * y).collect();
                    let shape = g.shape().to_vec();
                    self.accum(a, Tensor::new(shape.clone(), da_data).unwrap());
                    self.accum(b, Tensor::new(shape, db_data).unwrap());
                }
                Op::DivCol(x, den) => {
                    let (vx, vd) = (self.value(x), self.value(den));
                    let (n, c) = (vx.rows(), vx.cols());
                    let mut dx = Tensor::zeros(n, c);
                    let mut dden = Tensor::zeros(n, 1);
                    for r in 0..n {
                        let d = vd.get(r, 0);
                        let mut acc = 0.0;
                        for cc in 0..c {
                            let go = g.get(r, cc);
                            dx.set(r, cc, go / d);
                            acc += go * (-vx.get(r, cc) / (d * d));
                        }
                        dden.set(r, 0, acc);
                    }
                    self.accum(x, dx);
                    self.accum(den, dden);
                }
                Op::Scale(x, c) => {
                    let mut dx = g;
                    dx.scale_assign(c);
                    self.accum(x, dx);
                }
                Op::AddScalar(x) => self.accum(x, g),
                Op::AddRow(x, row) => {
                    let cols = g.cols();
                    let mut drow = Tensor::zeros(1, cols);
                    for r in 0..g.rows() {
                        for c in 0..cols {
                            drow.data_mut()[c] += g.get(r, c);
                        }
                    }
                    self.accum(x, g);
                    self.accum(row, drow);
                }
                Op::Relu(x) => {
                    let data: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(self.value(x).data())
                        .map(|(go, &v)| if v > 0.0 { *go } else { 0.0 })
                        .collect();
                    let dx = Tensor::new(g.shape().to_vec(), data).unwrap();
                    self.accum(x, dx);
                }
                Op::Softplus(x) => {
                    let data: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(self.value(x).data())
                        .map(|(go, &v)| go * sigmoid(v))
                        .collect();
                    let dx = Tensor::new(g.shape().to_vec(), data).unwrap();
                    self.accum(x, dx);
                }
                Op::MeanRows(x) => {
                    let vx = self.value(x);
                    let (n, d) = (vx.rows(), vx.cols());
                    let mut dx = Tensor::zeros(n, d);
                    for r in 0..n {
                        for c in 0..d {
                            dx.set(r, c, g.get(0, c) / n as f64);
                        }
                    }
                    self.accum(x, dx);
                }
                Op::SumAll(x) => {
                    let vx = self.value(x);
                    let dx = Tensor::filled(vx.rows(), vx.cols(), g.item());
                    self.accum(x, dx);
                }
                Op::MeanAll(x) => {
                    let vx = self.value(x);
                    let dx = Tensor::filled(vx.rows(), vx.cols(), g.item() / vx.len() as f64);
                    self.accum(x, dx);
                }
                Op::Row(x, r) => {
                    let vx = self.value(x);
                    let mut dx = Tensor::zeros(vx.rows(), vx.cols());
                    for c in 0..vx.cols() {
                        dx.set(r, c, g.get(0, c));
                    }
                    self.accum(x, dx);
                }
                Op::Entry(x, flat) => {
                    let vx = self.value(x);
                    let mut dx = Tensor::zeros(vx.rows(), vx.cols());
                    dx.data_mut()[flat] = g.item();
                    self.accum(x, dx);
                }
                Op::SliceFlat(x, start) => {
                    let vx = self.value(x);
                    let mut dx = Tensor::zeros(vx.rows(), vx.cols());
                    for (i, go) in g.data().iter().enumerate() {
                        dx.data_mut()[start + i] = *go;
                    }
                    self.accum(x, dx);
                }
                Op::ConcatCols(a, b) => {
                    let (va, vb) = (self.value(a).clone(), self.value(b).clone());
                    let (n, ca, cb) = (va.rows(), va.cols(), vb.cols());
                    let mut da = Tensor::zeros(n, ca);
                    let mut db = Tensor::zeros(n, cb);
                    for r in 0..n {
                        for c in 0..ca {
                            da.set(r, c, g.get(r, c));
                        }
                        for c in 0..cb {
                            db.set(r, c, g.get(r, ca + c));
                        }
                    }
                    self.accum(a, da);
                    self.accum(b, db);
                }
                Op::ConcatFlat(a, b) => {
                    let (va, vb) = (self.value(a).clone(), self.value(b).clone());
                    let da_data = g.data()[..va.len()].to_vec();
                    let db_data = g.data()[va.len()..].to_vec();
                    self.accum(a, Tensor::new(va.shape().to_vec(), da_data).unwrap());
                    self.accum(b, Tensor::new(vb.shape().to_vec(), db_data).unwrap());
                }
                Op::Reshape(x) => {
                    let vx = self.value(x);
                    let dx = Tensor::new(vx.shape().to_vec(), g.data().to_vec()).unwrap();
                    self.accum(x, dx);
                }
                Op::MaskRowsNeg(x, mask) => {
                    let mut dx = g;
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            for c in 0..dx.cols() {
                                dx.set(r, c, 0.0);
                            }
                        }
                    }
                    self.accum(x, dx);
                }
                Op::LogSumExp(x) => {
                    let go = g.item();
                    let lse = self.nodes[idx].value.item();
                    let vx = self.value(x);
                    let data: Vec<f64> = vx.data().iter().map(|&v| go * (v - lse).exp()).collect();
                    let dx = Tensor::new(vx.shape().to_vec(), data).unwrap();
                    self.accum(x, dx);
                }
                Op::LayerNorm(x, eps) => {
                    let vx = self.value(x);
                    let y = &self.nodes[idx].value;
                    let (n, d) = (vx.rows(), vx.cols());
                    let mut dx = Tensor::zeros(n, d);
                    for r in 0..n {
                        let row = vx.row_slice(r);
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gy = g.row_slice(r);
                        let yr = y.row_slice(r);
                        let mean_g = gy.iter().sum::<f64>() / d as f64;
                        let mean_gy =
                            gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for c in 0..d {
                            dx.set(r, c, inv * (gy[c] - mean_g - yr[c] * mean_gy));
                        }
                    }
                    self.accum(x, dx);
                }
                Op::Dropout(x, mask) => {
                    let data: Vec<f64> =
                        g.data().iter().zip(&mask).map(|(go, m)| go * m).collect();
                    let dx = Tensor::new(g.shape().to_vec(), data).unwrap();
                    self.accum(x, dx);
                }
            }
        }
        Ok(())
    }

    fn accum(&mut self, id: NodeId, delta: Tensor) {
        match &mut self.grads[id.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences on a scalar-valued tape program.
    fn fd_grad(build: impl Fn(&mut Tape, &Tensor) -> NodeId, x: &Tensor, h: f64) -> Tensor {
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let mut tp = Tape::new();
            let fp = build(&mut tp, &xp);
            let mut tm = Tape::new();
            let fm = build(&mut tm, &xm);
            out.data_mut()[i] = (tp.value(fp).item() - tm.value(fm).item()) / (2.0 * h);
        }
        out
    }

    fn check(build: impl Fn(&mut Tape, &Tensor) -> NodeId + Copy, x: &Tensor) {
        let mut tape = Tape::new();
        // Bind x as a parameter so we can ask for its gradient.
        let loss = build(&mut tape, x);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(NodeId(0)).unwrap().clone();
        let numeric = fd_grad(build, x, 1e-5);
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            let denom = a.abs().max(n.abs()).max(1e-4);
            assert!((a - n).abs() / denom < 1e-4, "analytic {a} vs numeric {n}");
        }
    }

    fn seeded(vals: &[f64], rows: usize, cols: usize) -> Tensor {
        Tensor::new(vec![rows, cols], vals.to_vec()).unwrap()
    }

    #[test]
    fn grad_matmul_chain() {
        let x = seeded(&[0.3, -0.7, 1.2, 0.4, -0.1, 0.9], 2, 3);
        check(
            |t, x| {
                let xn = t.param(0, "x", x);
                let w = t.constant(seeded(&[0.5, -0.2, 0.1, 0.8, -0.6, 0.3], 3, 2));
                let y = t.matmul(xn, w);
                let y2 = t.relu(y);
                t.sum_all(y2)
            },
            &x,
        );
    }

    #[test]
    fn grad_matmul_ta() {
        let x = seeded(&[0.3, -0.7, 1.2, 0.4], 2, 2);
        check(
            |t, x| {
                let xn = t.param(0, "x", x);
                let w = t.constant(seeded(&[0.5, -0.2, 0.15, 0.8], 2, 2));
                let y = t.matmul_ta(xn, w);
                t.sum_all(y)
            },
            &x,
        );
    }

    #[test]
    fn grad_through_softplus_divcol_lse() {
        let x = seeded(&[0.3, -0.7, 1.2, 0.4, 0.9, -0.5], 2, 3);
        check(
            |t, x| {
                let xn = t.param(0, "x", x);
                let sp = t.softplus(xn);
                let sp = t.add_scalar(sp, 1e-6);
                let ones = t.constant(Tensor::filled(3, 1, 1.0));
                let den = t.matmul(sp, ones);
                let y = t.div_col(sp, den);
                let z = t.logsumexp(y);
                t.sum_all(z)
            },
            &x,
        );
    }

    #[test]
    fn grad_through_layer_norm_and_rows() {
        let x = seeded(&[0.3, -0.7, 1.2, 0.4, 0.9, -0.5, 0.2, -1.1], 2, 4);
        check(
            |t, x| {
                let xn = t.param(0, "x", x);
                let y = t.layer_norm(xn, 1e-5);
                let r = t.row(y, 1);
                let m = t.mean_rows(y);
                let s = t.concat_flat(r, m);
                let e = t.entry(s, 2);
                let q = t.mul(s, s);
                let tot = t.sum_all(q);
                t.add(tot, e)
            },
            &x,
        );
    }

    #[test]
    fn grad_through_mask_and_concat() {
        let x = seeded(&[0.3, -0.7, 1.2, 0.4, 0.9, -0.5], 3, 2);
        check(
            |t, x| {
                let xn = t.param(0, "x", x);
                let masked = t.mask_rows_neg(xn, &[false, true, false]);
                let flat = t.reshape(masked, 1, 6);
                let lse = t.logsumexp(flat);
                let e = t.entry(flat, 0);
                let d = t.sub(e, lse);
                t.sum_all(d)
            },
            &x,
        );
    }

    #[test]
    fn grad_mean_rows_add_row_sub() {
        let x = seeded(&[0.3, -0.7, 1.2, 0.4, 0.9, -0.5], 3, 2);
        check(
            |t, x| {
                let xn = t.param(0, "x", x);
                let m = t.mean_rows(xn);
                let shifted = t.sub_row(xn, m);
                let cat = t.concat_cols(xn, shifted);
                let ln = t.mean_all(cat);
                let sc = t.scale(ln, 2.5);
                let row = t.row(cat, 0);
                let rsum = t.sum_all(row);
                t.add(sc, rsum)
            },
            &x,
        );
    }

    #[test]
    fn param_interning_accumulates_fanout() {
        let x = Tensor::scalar(3.0);
        let mut tape = Tape::new();
        let a = tape.param(0, "x", &x);
        let b = tape.param(0, "x", &x);
        assert_eq!(a, b);
        let y = tape.mul(a, b); // x^2
        tape.backward(y).unwrap();
        assert!((tape.grad(a).unwrap().item() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn masked_rows_get_zero_probability_and_zero_grad() {
        let x = Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mut tape = Tape::new();
        let xn = tape.param(0, "x", &x);
        let masked = tape.mask_rows_neg(xn, &[false, true]);
        let flat = tape.reshape(masked, 1, 4);
        let lse = tape.logsumexp(flat);
        let probs: Vec<f64> =
            tape.value(flat).data().iter().map(|&l| (l - tape.value(lse).item()).exp()).collect();
        assert!(probs[2] < 1e-30 && probs[3] < 1e-30);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        tape.backward(lse).unwrap();
        let gx = tape.grad(xn).unwrap();
        assert_eq!(gx.get(1, 0), 0.0);
        assert_eq!(gx.get(1, 1), 0.0);
        assert!(gx.get(0, 0) > 0.0);
    }

    #[test]
    fn dropout_mask_scales_values_and_grads() {
        let x = Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut tape = Tape::new();
        let xn = tape.param(0, "x", &x);
        let y = tape.dropout(xn, vec![2.0, 0.0, 2.0, 0.0]);
        let s = tape.sum_all(y);
        assert_eq!(tape.value(s).item(), 8.0);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(xn).unwrap().data(), &[2.0, 0.0, 2.0, 0.0]);
    }
}
