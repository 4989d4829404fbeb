//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. Nodes are only
//! ever appended, so creation order is a topological order and
//! [`Tape::backward`] walks the tape once from the loss towards the leaves.
//! Parameters enter the tape through [`Tape::param`]; their gradients are
//! added into the owning [`ParamStore`] at the end of each backward pass.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::array::{axis_extents, matmul_at_into, matmul_bt_into, matmul_into, Tensor};
use crate::error::{Result, TensorError};
use crate::param::{ParamId, ParamStore};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Tape::custom_unary`]: `(input, output, output_grad) -> input_grad`.
pub type UnaryBackward = Box<dyn Fn(&Tensor, &Tensor, &Tensor) -> Tensor>;

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    Gather { input: Var, idx: Vec<usize> },
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    Sigmoid(Var),
    Log(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Gelu(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Sum(Var),
    Mean(Var),
    RelationScores { q: Var, k: Var, table: Var, rel: Vec<usize>, scale: f64 },
    Custom { x: Var, backward: UnaryBackward },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// A single-threaded recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced on tape");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a value that gradients are not tracked for.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records an input whose gradient is reported by [`Gradients::get`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Brings a stored parameter onto the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a * b^T` without materialising the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).require_matrix("matmul_bt")?;
        let (m, k2) = self.value(b).require_matrix("matmul_bt")?;
        if k != k2 {
            return Err(mismatch("matmul_bt", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; n * m];
        matmul_bt_into(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::MatMulBt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds a `[d]` vector to every row of an `[.., d]` tensor.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tr.ndim() != 1 || tx.ndim() == 0 || tx.cols() != tr.len() {
            return Err(mismatch("add_row", tx, tr));
        }
        let d = tr.len();
        let mut data = tx.data().to_vec();
        for chunk in data.chunks_mut(d) {
            for (v, b) in chunk.iter_mut().zip(tr.data()) {
                *v += b;
            }
        }
        let value = Tensor::new(tx.shape(), data)?;
        let rg = self.rg(&[x, row]);
        Ok(self.push(value, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut value = self.value(x).clone();
        value.scale_in_place(s);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, s), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Concatenates tensors of equal rank along `axis`.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(TensorError::InvalidShape { shape: vec![], len: 0 })?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::RankMismatch { op: "concat", expected: axis + 1, shape: base });
        }
        let mut total = 0;
        for v in inputs {
            let s = self.value(*v).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", self.value(*first), self.value(*v)));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.ndim() {
            return Err(TensorError::RankMismatch { op: "slice", expected: axis + 1, shape: t.shape().to_vec() });
        }
        if len == 0 || start + len > t.shape()[axis] {
            return Err(TensorError::IndexOutOfRange { op: "slice", index: start + len, bound: t.shape()[axis] });
        }
        let (outer, alen, inner) = axis_extents(t.shape(), axis);
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * alen * inner + start * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Slice { input: x, axis, start }, rg))
    }

    /// Row gather from a `[n, d]` table; this is the embedding lookup.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (n, d) = t.require_matrix("gather_rows")?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(TensorError::IndexOutOfRange { op: "gather_rows", index: id, bound: n });
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(&[ids.len(), d], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(value, Op::GatherRows { table, ids: ids.to_vec() }, rg))
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Picks elements by flat index into a `[idx.len()]` vector.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= t.len() {
                return Err(TensorError::IndexOutOfRange { op: "gather", index: i, bound: t.len() });
            }
            data.push(t.data()[i]);
        }
        let value = Tensor::new(&[idx.len()], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Gather { input: x, idx: idx.to_vec() }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(t.cols()) {
            softmax_in_place(row);
        }
        let value = Tensor::new(t.shape(), data).expect("shape preserved");
        let rg = self.rg(&[x]);
        self.push(value, Op::Softmax(x), rg)
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.shape() != [d] {
            return Err(mismatch("layer_norm", tx, tg));
        }
        if tb.shape() != [d] {
            return Err(mismatch("layer_norm", tx, tb));
        }
        let rows = tx.rows();
        let mut xhat = Vec::with_capacity(tx.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(tx.len());
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for (c, v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * tg.data()[c] + tb.data()[c]);
            }
        }
        let value = Tensor::new(tx.shape(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Inverted dropout; the identity when not training or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, seed: u64) -> Var {
        if !training || p <= 0.0 {
            return x;
        }
        let t = self.value(x);
        let keep = 1.0 - p;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(t.shape(), data).expect("shape preserved");
        let rg = self.rg(&[x]);
        self.push(value, Op::Dropout { x, mask }, rg)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| f(*v)).collect();
        let value = Tensor::new(t.shape(), data).expect("shape preserved");
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, Op::Log(x), f64::ln)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping was active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, Op::Gelu(x), |v| gelu(v).0)
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (n, v) = t.require_matrix("cross_entropy")?;
        if targets.len() != n {
            return Err(TensorError::ShapeMismatch { op: "cross_entropy", lhs: vec![n, v], rhs: vec![targets.len()] });
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (r, &target) in targets.iter().enumerate() {
            if target >= v {
                return Err(TensorError::IndexOutOfRange { op: "cross_entropy", index: target, bound: v });
            }
            let row = &mut probs[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[target];
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let value = Tensor::scalar(loss / n as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(value, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    /// Attention logits with a relation embedding shared by query and key:
    /// `e[i][j] = ((q_i + r_ij) . (k_j + r_ij) - r_ij . r_ij) * scale`
    /// where `r_ij` is row `rel[i * n + j]` of `table`.
    pub fn relation_scores(&mut self, q: Var, k: Var, table: Var, rel: &[usize], scale: f64) -> Result<Var> {
        let (tq, tk, tt) = (self.value(q), self.value(k), self.value(table));
        let (n, d) = tq.require_matrix("relation_scores")?;
        let (m, dk) = tk.require_matrix("relation_scores")?;
        let (rows, dt) = tt.require_matrix("relation_scores")?;
        if n != m || d != dk {
            return Err(mismatch("relation_scores", tq, tk));
        }
        if dt != d {
            return Err(mismatch("relation_scores", tq, tt));
        }
        if rel.len() != n * n {
            return Err(TensorError::ShapeMismatch { op: "relation_scores", lhs: vec![n, n], rhs: vec![rel.len()] });
        }
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            let qi = tq.row(i);
            for j in 0..n {
                let idx = rel[i * n + j];
                if idx >= rows {
                    return Err(TensorError::IndexOutOfRange { op: "relation_scores", index: idx, bound: rows });
                }
                let r = tt.row(idx);
                let kj = tk.row(j);
                let mut e = 0.0;
                for c in 0..d {
                    e += (qi[c] + r[c]) * (kj[c] + r[c]) - r[c] * r[c];
                }
                out.push(e * scale);
            }
        }
        let value = Tensor::new(&[n, n], out)?;
        let rg = self.rg(&[q, k, table]);
        Ok(self.push(value, Op::RelationScores { q, k, table, rel: rel.to_vec(), scale }, rg))
    }

    /// Element-wise operation with caller-supplied forward and backward rules.
    pub fn custom_unary(&mut self, x: Var, forward: impl Fn(&Tensor) -> Tensor, backward: UnaryBackward) -> Result<Var> {
        let value = forward(self.value(x));
        if value.shape() != self.value(x).shape() {
            return Err(mismatch("custom_unary", self.value(x), &value));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Custom { x, backward }, rg))
    }

    /// Propagates d(loss)/d(node) back through the tape and adds parameter
    /// gradients into `store`. Calling it twice accumulates twice.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalar(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            if let Op::Param(id) = node.op {
                store.get_mut(id).grad.add_assign(&g);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Adds into the gradient slot of `v` in place via `f(acc_data)`.
    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().expect("initialised").data_mut());
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = (ta.rows(), ta.cols());
                let m = tb.cols();
                // dA = G B^T, dB = A^T G
                self.accumulate_with(grads, *a, |acc| matmul_bt_into(gd, tb.data(), acc, n, m, k));
                self.accumulate_with(grads, *b, |acc| matmul_at_into(ta.data(), gd, acc, n, k, m));
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = (ta.rows(), ta.cols());
                let m = tb.rows();
                // out = A B^T: dA = G B, dB = G^T A
                self.accumulate_with(grads, *a, |acc| matmul_into(gd, tb.data(), acc, n, m, k));
                self.accumulate_with(grads, *b, |acc| matmul_at_into(gd, ta.data(), acc, n, m, k));
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()?),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let mut neg = g.clone();
                neg.scale_in_place(-1.0);
                self.accumulate(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate_with(grads, *a, |acc| {
                    for ((o, gv), bv) in acc.iter_mut().zip(gd).zip(tb.data()) {
                        *o += gv * bv;
                    }
                });
                self.accumulate_with(grads, *b, |acc| {
                    for ((o, gv), av) in acc.iter_mut().zip(gd).zip(ta.data()) {
                        *o += gv * av;
                    }
                });
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                let d = self.value(*row).len();
                self.accumulate_with(grads, *row, |acc| {
                    for chunk in gd.chunks(d) {
                        for (o, v) in acc.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Scale(x, s) => {
                let mut gx = g.clone();
                gx.scale_in_place(*s);
                self.accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.reshaped(&shape)?);
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_extents(g.shape(), *axis);
                let mut offset_in_row = 0;
                let row_len = g.len() / outer;
                for v in inputs {
                    let block = self.value(*v).shape()[*axis] * inner;
                    self.accumulate_with(grads, *v, |acc| {
                        for o in 0..outer {
                            let src = &gd[o * row_len + offset_in_row..o * row_len + offset_in_row + block];
                            for (a, s) in acc[o * block..(o + 1) * block].iter_mut().zip(src) {
                                *a += s;
                            }
                        }
                    });
                    offset_in_row += block;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, alen, inner) = axis_extents(self.value(*input).shape(), *axis);
                let len = g.shape()[*axis];
                self.accumulate_with(grads, *input, |acc| {
                    for o in 0..outer {
                        let base = o * alen * inner + start * inner;
                        let src = &gd[o * len * inner..(o + 1) * len * inner];
                        for (a, s) in acc[base..base + len * inner].iter_mut().zip(src) {
                            *a += s;
                        }
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let d = self.value(*table).cols();
                self.accumulate_with(grads, *table, |acc| {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            acc[id * d + c] += gd[r * d + c];
                        }
                    }
                });
            }
            Op::Gather { input, idx } => {
                self.accumulate_with(grads, *input, |acc| {
                    for (r, &i) in idx.iter().enumerate() {
                        acc[i] += gd[r];
                    }
                });
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.cols();
                self.accumulate_with(grads, *x, |acc| {
                    for r in 0..y.rows() {
                        let yr = &y.data()[r * c..(r + 1) * c];
                        let gr = &gd[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            acc[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let tg = self.value(*gain);
                let d = tg.len();
                let rows = rstd.len();
                self.accumulate_with(grads, *gain, |acc| {
                    for r in 0..rows {
                        for c in 0..d {
                            acc[c] += gd[r * d + c] * xhat[r * d + c];
                        }
                    }
                });
                self.accumulate_with(grads, *bias, |acc| {
                    for r in 0..rows {
                        for c in 0..d {
                            acc[c] += gd[r * d + c];
                        }
                    }
                });
                self.accumulate_with(grads, *x, |acc| {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let xh = &xhat[r * d..(r + 1) * d];
                        for c in 0..d {
                            dxhat[c] = gd[r * d + c] * tg.data()[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for c in 0..d {
                            acc[r * d + c] += rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.accumulate_with(grads, *x, |acc| {
                    for ((a, gv), m) in acc.iter_mut().zip(gd).zip(mask) {
                        *a += gv * m;
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                self.accumulate_with(grads, *x, |acc| {
                    for ((a, gv), yv) in acc.iter_mut().zip(gd).zip(y) {
                        *a += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Log(x) => {
                let tx = self.value(*x).data();
                self.accumulate_with(grads, *x, |acc| {
                    for ((a, gv), xv) in acc.iter_mut().zip(gd).zip(tx) {
                        *a += gv / xv;
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let tx = self.value(*x).data();
                self.accumulate_with(grads, *x, |acc| {
                    for ((a, gv), xv) in acc.iter_mut().zip(gd).zip(tx) {
                        if *xv >= *lo && *xv <= *hi {
                            *a += gv;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let tx = self.value(*x).data();
                self.accumulate_with(grads, *x, |acc| {
                    for ((a, gv), xv) in acc.iter_mut().zip(gd).zip(tx) {
                        *a += gv * gelu(*xv).1;
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = targets.len();
                let v = probs.len() / n;
                let s = gd[0] / n as f64;
                self.accumulate_with(grads, *logits, |acc| {
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..v {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            acc[r * v + c] += s * (probs[r * v + c] - onehot);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let s = gd[0];
                self.accumulate_with(grads, *x, |acc| acc.iter_mut().for_each(|a| *a += s));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                let s = gd[0] / n;
                self.accumulate_with(grads, *x, |acc| acc.iter_mut().for_each(|a| *a += s));
            }
            Op::RelationScores { q, k, table, rel, scale } => {
                let (tq, tk, tt) = (self.value(*q), self.value(*k), self.value(*table));
                let (n, d) = (tq.rows(), tq.cols());
                // de/dq_i = k_j + r, de/dk_j = q_i + r, de/dr = q_i + k_j
                self.accumulate_with(grads, *q, |acc| {
                    for i in 0..n {
                        for j in 0..n {
                            let w = gd[i * n + j] * scale;
                            let r = tt.row(rel[i * n + j]);
                            let kj = tk.row(j);
                            for c in 0..d {
                                acc[i * d + c] += w * (kj[c] + r[c]);
                            }
                        }
                    }
                });
                self.accumulate_with(grads, *k, |acc| {
                    for i in 0..n {
                        let qi = tq.row(i);
                        for j in 0..n {
                            let w = gd[i * n + j] * scale;
                            let r = tt.row(rel[i * n + j]);
                            for c in 0..d {
                                acc[j * d + c] += w * (qi[c] + r[c]);
                            }
                        }
                    }
                });
                self.accumulate_with(grads, *table, |acc| {
                    for i in 0..n {
                        let qi = tq.row(i);
                        for j in 0..n {
                            let w = gd[i * n + j] * scale;
                            let kj = tk.row(j);
                            let base = rel[i * n + j] * d;
                            for c in 0..d {
                                acc[base + c] += w * (qi[c] + kj[c]);
                            }
                        }
                    }
                });
            }
            Op::Custom { x, backward } => {
                let gx = backward(self.value(*x), &node.value, g);
                self.accumulate(grads, *x, gx);
            }
        }
        Ok(())
    }
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn store_with(name: &str, value: Tensor) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add(name, value);
        (store, id)
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3]));
        let y = tape.softmax(x);
        for v in tape.value(y).data() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn layer_norm_of_constant_vector_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(&[1, 4], 3.5));
        let g = tape.constant(Tensor::ones(&[4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let (mut store, id) = store_with("x", Tensor::vector(vec![0.3, -1.0, 2.0]));
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let loss = tape.sum(x);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(id).grad.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn quadratic_gradient() {
        let (mut store, id) = store_with("x", Tensor::vector(vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let xx = tape.mul(x, x).unwrap();
        let loss = tape.sum(xx);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(id).grad.data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_twice_doubles() {
        let (mut store, id) = store_with("x", Tensor::vector(vec![1.5, -0.5]));
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let s = tape.sigmoid(x);
        let loss = tape.sum(s);
        tape.backward(loss, &mut store).unwrap();
        let once = store.get(id).grad.clone();
        tape.backward(loss, &mut store).unwrap();
        for (a, b) in store.get(id).grad.data().iter().zip(once.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn backward_on_constant_is_detached() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0]));
        let loss = tape.sum(x);
        assert!(matches!(tape.backward(loss, &mut store), Err(TensorError::Detached)));
    }

    #[test]
    fn backward_requires_scalar() {
        let (mut store, id) = store_with("x", Tensor::vector(vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        assert!(matches!(tape.backward(x, &mut store), Err(TensorError::NonScalar(_))));
    }

    #[test]
    fn input_gradients_are_reported() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![2.0, 3.0]));
        let l = tape.log(x);
        let loss = tape.sum(l);
        let grads = tape.backward(loss, &mut store).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.5, 1.0 / 3.0]);
    }

    #[test]
    fn dropout_is_seeded_and_inverted() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1000]));
        let a = tape.dropout(x, 0.5, true, 11);
        let b = tape.dropout(x, 0.5, true, 11);
        assert_eq!(tape.value(a), tape.value(b));
        assert!(tape.value(a).data().iter().all(|v| *v == 0.0 || *v == 2.0));
        assert_eq!(tape.dropout(x, 0.5, false, 11), x);
    }

    #[test]
    fn cross_entropy_uniform_is_log_v() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 7]));
        let l = tape.cross_entropy(x, &[3, 6]).unwrap();
        assert_abs_diff_eq!(tape.value(l).item().unwrap(), 7f64.ln(), epsilon = 1e-12);
        assert!(tape.cross_entropy(x, &[7, 0]).is_err());
    }

    #[test]
    fn slice_and_concat_invert() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 5], (0..10).map(f64::from).collect()).unwrap());
        let a = tape.slice(x, 1, 0, 2).unwrap();
        let b = tape.slice(x, 1, 2, 3).unwrap();
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c), tape.value(x));
        assert_eq!(tape.value(b).data(), &[2.0, 3.0, 4.0, 7.0, 8.0, 9.0]);
    }
}
