//! Operation tape: forward recording and reverse-mode gradient accumulation.

use crate::{NdiffError, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Log(NodeId),
    Clamp(NodeId, f64, f64),
    Softmax(NodeId),
    Concat(Vec<NodeId>),
    SliceTime(NodeId, usize),
    SelectRows(NodeId, Vec<usize>),
    /// Mask already folded with the inverted keep-probability scaling.
    Dropout(NodeId, Vec<f64>),
    Mean(NodeId),
    Sum(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation; `backward` fills per-node gradients.
///
/// Node ids index creation order, so every operation refers only to earlier
/// nodes and a single reverse sweep visits each node exactly once.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    swept: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            swept: false,
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert an input node. Parameters and constants are both leaves; the
    /// caller decides which gradients it cares about after the sweep.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the swept root with respect to node `id`, if the node was
    /// reached by the sweep.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Like [`Tape::grad`] but yields zeros for unreached nodes.
    pub fn grad_or_zeros(&self, id: NodeId) -> Tensor {
        match self.grad(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[id.0].value.shape()),
        }
    }

    /// Clear gradients so the same tape may be swept again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.swept = false;
    }

    // ---- forward operations ----

    /// 2-D matrix product `(m x k) . (k x n)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.ndim() != 2 || vb.ndim() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(NdiffError::ShapeMismatch {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![0.0; m * n];
        let (da, db) = (va.data(), vb.data());
        for i in 0..m {
            for p in 0..k {
                let aip = da[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        Ok(self.push(Tensor::from_vec(&[m, n], out)?, Op::MatMul(a, b)))
    }

    fn binary_shapes(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        let row_broadcast = sb.len() == 1 && sa.last() == sb.last();
        if sa != sb && !row_broadcast {
            return Err(NdiffError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// Elementwise sum; `b` may be a 1-D vector broadcast over the rows of
    /// `a` (the bias case).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shapes("add", a, b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let n = vb.len();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + vb.data()[i % n])
            .collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shapes("sub", a, b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let n = vb.len();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x - vb.data()[i % n])
            .collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa != sb {
            return Err(NdiffError::ShapeMismatch {
                op: "mul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let va = &self.nodes[a.0].value;
        let out = Tensor::from_vec(va.shape(), va.data().iter().map(|x| x * k).collect()).unwrap();
        self.push(out, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> NodeId {
        let va = &self.nodes[a.0].value;
        let out = Tensor::from_vec(va.shape(), va.data().iter().map(|x| x + k).collect()).unwrap();
        self.push(out, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|&x| sigmoid(x)).collect();
        let out = Tensor::from_vec(va.shape(), data).unwrap();
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|x| x.tanh()).collect();
        let out = Tensor::from_vec(va.shape(), data).unwrap();
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|x| x.max(0.0)).collect();
        let out = Tensor::from_vec(va.shape(), data).unwrap();
        self.push(out, Op::Relu(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|x| x.ln()).collect();
        let out = Tensor::from_vec(va.shape(), data).unwrap();
        self.push(out, Op::Log(a))
    }

    /// Clamp to `[lo, hi]`; the gradient is zero outside the open interval.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|x| x.clamp(lo, hi)).collect();
        let out = Tensor::from_vec(va.shape(), data).unwrap();
        self.push(out, Op::Clamp(a, lo, hi))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        if va.ndim() == 0 {
            return Err(NdiffError::BadShape {
                op: "softmax",
                expected: "at least one axis",
                got: va.shape().to_vec(),
            });
        }
        let n = *va.shape().last().unwrap();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let out = Tensor::from_vec(va.shape(), data)?;
        Ok(self.push(out, Op::Softmax(a)))
    }

    /// Concatenate along the last (feature) axis. All parts must agree on the
    /// leading axes.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty(), "concat of zero parts");
        let lead = |s: &[usize]| s[..s.len() - 1].to_vec();
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        let mut width = 0;
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != first.len() || lead(s) != lead(&first) {
                return Err(NdiffError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            width += s[s.len() - 1];
        }
        let rows: usize = lead(&first).iter().product();
        let mut data = vec![0.0; rows * width];
        let mut offset = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            let w = *v.shape().last().unwrap();
            for r in 0..rows {
                data[r * width + offset..r * width + offset + w]
                    .copy_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead(&first);
        shape.push(width);
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Select step `t` of a time-major tensor: `(T, B, F) -> (B, F)`.
    pub fn slice_time(&mut self, a: NodeId, t: usize) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        if va.ndim() != 3 {
            return Err(NdiffError::BadShape {
                op: "slice_time",
                expected: "three axes (time, batch, feature)",
                got: va.shape().to_vec(),
            });
        }
        let (steps, b, f) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        if t >= steps {
            return Err(NdiffError::IndexOutOfBounds {
                op: "slice_time",
                index: t,
                len: steps,
            });
        }
        let data = va.data()[t * b * f..(t + 1) * b * f].to_vec();
        let out = Tensor::from_vec(&[b, f], data)?;
        Ok(self.push(out, Op::SliceTime(a, t)))
    }

    /// Gather rows of a 2-D tensor; rows may repeat.
    pub fn select_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        if va.ndim() != 2 {
            return Err(NdiffError::BadShape {
                op: "select_rows",
                expected: "two axes",
                got: va.shape().to_vec(),
            });
        }
        let (m, n) = (va.shape()[0], va.shape()[1]);
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(NdiffError::IndexOutOfBounds {
                    op: "select_rows",
                    index: r,
                    len: m,
                });
            }
            data.extend_from_slice(&va.data()[r * n..(r + 1) * n]);
        }
        let out = Tensor::from_vec(&[rows.len(), n], data)?;
        Ok(self.push(out, Op::SelectRows(a, rows.to_vec())))
    }

    /// Inverted dropout: kept units are scaled by `1/(1-p)` so the
    /// expectation is preserved; `train = false` (or `p = 0`) is the
    /// identity. `p >= 1` zeroes everything.
    pub fn dropout(&mut self, a: NodeId, p: f64, seed: u64, train: bool) -> NodeId {
        if !train || p <= 0.0 {
            let va = self.nodes[a.0].value.clone();
            let mask = vec![1.0; va.len()];
            return self.push(va, Op::Dropout(a, mask));
        }
        let va = &self.nodes[a.0].value;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep_scale = if p >= 1.0 { 0.0 } else { 1.0 / (1.0 - p) };
        let mask: Vec<f64> = (0..va.len())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let data = va.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::from_vec(va.shape(), data).unwrap();
        self.push(out, Op::Dropout(a, mask))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let m = va.data().iter().sum::<f64>() / va.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let s = va.data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar root. Fills gradients for every node the
    /// root depends on; others stay unset and read back as zeros.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.swept {
            return Err(NdiffError::BackwardTwice);
        }
        let rv = &self.nodes[root.0].value;
        if !rv.is_scalar() {
            return Err(NdiffError::NonScalarRoot {
                got: rv.shape().to_vec(),
            });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        self.swept = true;
        Ok(())
    }

    fn accumulate(&mut self, target: NodeId, delta: Tensor) {
        match self.grads[target.0].as_mut() {
            Some(acc) => {
                for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                    *a += d;
                }
            }
            None => self.grads[target.0] = Some(delta),
        }
    }

    fn propagate(&mut self, i: usize, g: &Tensor) {
        // Ops only reference earlier nodes, so values of parents are stable.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let va = self.nodes[a.0].value.clone();
                let vb = self.nodes[b.0].value.clone();
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                // dA = g . B^T
                let mut da = vec![0.0; m * k];
                for r in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g.data()[r * n + j] * vb.data()[p * n + j];
                        }
                        da[r * k + p] = acc;
                    }
                }
                // dB = A^T . g
                let mut db = vec![0.0; k * n];
                for p in 0..k {
                    for r in 0..m {
                        let arp = va.data()[r * k + p];
                        if arp == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += arp * g.data()[r * n + j];
                        }
                    }
                }
                self.accumulate(a, Tensor::from_vec(&[m, k], da).unwrap());
                self.accumulate(b, Tensor::from_vec(&[k, n], db).unwrap());
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g.clone());
                self.accumulate(b, reduce_to(&self.nodes[b.0].value, g));
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g.clone());
                let mut db = reduce_to(&self.nodes[b.0].value, g);
                for x in db.data_mut() {
                    *x = -*x;
                }
                self.accumulate(b, db);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let va = self.nodes[a.0].value.clone();
                let vb = self.nodes[b.0].value.clone();
                let da = zip_map(g, &vb, |gi, y| gi * y);
                let db = zip_map(g, &va, |gi, x| gi * x);
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Scale(a, k) => {
                let (a, k) = (*a, *k);
                let da = map_grad(g, |gi| gi * k);
                self.accumulate(a, da);
            }
            Op::AddScalar(a) => {
                let a = *a;
                self.accumulate(a, g.clone());
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let y = self.nodes[i].value.clone();
                let da = zip_map(g, &y, |gi, yi| gi * yi * (1.0 - yi));
                self.accumulate(a, da);
            }
            Op::Tanh(a) => {
                let a = *a;
                let y = self.nodes[i].value.clone();
                let da = zip_map(g, &y, |gi, yi| gi * (1.0 - yi * yi));
                self.accumulate(a, da);
            }
            Op::Relu(a) => {
                let a = *a;
                let x = self.nodes[a.0].value.clone();
                let da = zip_map(g, &x, |gi, xi| if xi > 0.0 { gi } else { 0.0 });
                self.accumulate(a, da);
            }
            Op::Log(a) => {
                let a = *a;
                let x = self.nodes[a.0].value.clone();
                let da = zip_map(g, &x, |gi, xi| gi / xi);
                self.accumulate(a, da);
            }
            Op::Clamp(a, lo, hi) => {
                let (a, lo, hi) = (*a, *lo, *hi);
                let x = self.nodes[a.0].value.clone();
                let da = zip_map(g, &x, |gi, xi| if xi > lo && xi < hi { gi } else { 0.0 });
                self.accumulate(a, da);
            }
            Op::Softmax(a) => {
                let a = *a;
                let y = self.nodes[i].value.clone();
                let n = *y.shape().last().unwrap();
                let mut da = vec![0.0; y.len()];
                for (r, (yr, gr)) in y.data().chunks(n).zip(g.data().chunks(n)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                    for j in 0..n {
                        da[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(a, Tensor::from_vec(y.shape(), da).unwrap());
            }
            Op::Concat(parts) => {
                let parts = parts.clone();
                let total = *self.nodes[i].value.shape().last().unwrap();
                let rows = self.nodes[i].value.len() / total;
                let mut offset = 0;
                for p in parts {
                    let v = &self.nodes[p.0].value;
                    let w = *v.shape().last().unwrap();
                    let shape = v.shape().to_vec();
                    let mut dp = vec![0.0; v.len()];
                    for r in 0..rows {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    self.accumulate(p, Tensor::from_vec(&shape, dp).unwrap());
                }
            }
            Op::SliceTime(a, t) => {
                let (a, t) = (*a, *t);
                let shape = self.nodes[a.0].value.shape().to_vec();
                let step = shape[1] * shape[2];
                let mut da = vec![0.0; shape.iter().product()];
                da[t * step..(t + 1) * step].copy_from_slice(g.data());
                self.accumulate(a, Tensor::from_vec(&shape, da).unwrap());
            }
            Op::SelectRows(a, rows) => {
                let (a, rows) = (*a, rows.clone());
                let shape = self.nodes[a.0].value.shape().to_vec();
                let n = shape[1];
                let mut da = vec![0.0; shape.iter().product()];
                for (out_r, &src_r) in rows.iter().enumerate() {
                    for j in 0..n {
                        da[src_r * n + j] += g.data()[out_r * n + j];
                    }
                }
                self.accumulate(a, Tensor::from_vec(&shape, da).unwrap());
            }
            Op::Dropout(a, mask) => {
                let a = *a;
                let da = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(mask).map(|(gi, m)| gi * m).collect(),
                )
                .unwrap();
                self.accumulate(a, da);
            }
            Op::Mean(a) => {
                let a = *a;
                let shape = self.nodes[a.0].value.shape().to_vec();
                let n: usize = shape.iter().product();
                let da = Tensor::full(&shape, g.item() / n as f64);
                self.accumulate(a, da);
            }
            Op::Sum(a) => {
                let a = *a;
                let shape = self.nodes[a.0].value.shape().to_vec();
                let da = Tensor::full(&shape, g.item());
                self.accumulate(a, da);
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn map_grad(g: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_vec(g.shape(), g.data().iter().map(|&x| f(x)).collect()).unwrap()
}

fn zip_map(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_vec(
        g.shape(),
        g.data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect(),
    )
    .unwrap()
}

/// Reduce a gradient onto a possibly-broadcast operand: if the operand was a
/// 1-D vector added across rows, row gradients are summed.
fn reduce_to(operand: &Tensor, g: &Tensor) -> Tensor {
    if operand.shape() == g.shape() {
        return g.clone();
    }
    let n = operand.len();
    let mut out = vec![0.0; n];
    for (i, x) in g.data().iter().enumerate() {
        out[i % n] += x;
    }
    Tensor::from_vec(operand.shape(), out).unwrap()
}
