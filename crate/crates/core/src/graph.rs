//! Tape-recorded tensor operations with reverse-mode accumulation.
//!
//! Every operation appends a node whose inputs already exist on the tape, so
//! node order is a topological order and the reverse pass is a single sweep
//! from the loss back to index zero. Nodes that do not depend on any
//! grad-enabled leaf are never visited on the way back, which is what keeps
//! prompt tuning cheap: the frozen backbone enters as constants.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optional instrumentation: multiply-accumulate count of every contraction
/// executed, plus labelled shape marks emitted by the encoders.
#[derive(Clone, Debug, Default)]
pub struct Probe {
    pub macs: u64,
    pub marks: Vec<(String, Vec<usize>)>,
}

impl Probe {
    /// Shapes recorded under `label`, in emission order.
    pub fn marks_for(&self, label: &str) -> Vec<Vec<usize>> {
        self.marks
            .iter()
            .filter(|(l, _)| l == label)
            .map(|(_, s)| s.clone())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mask {
    None,
    Causal,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionSpec {
    pub heads: usize,
    /// Tokens per sequence; rows are packed as `batch * seq_len`.
    pub seq_len: usize,
    pub mask: Mask,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRows(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Transpose(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
        inv_temp: T,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Concat(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    L2Normalize {
        x: Var,
        inv_norm: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    probe: Option<Probe>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            probe: None,
        }
    }

    pub fn with_probe() -> Self {
        Self {
            nodes: Vec::new(),
            probe: Some(Probe::default()),
        }
    }

    pub fn probe(&self) -> Option<&Probe> {
        self.probe.as_ref()
    }

    /// Records a labelled shape if probing is enabled.
    pub fn mark(&mut self, label: &str, shape: Vec<usize>) {
        if let Some(p) = self.probe.as_mut() {
            p.marks.push((label.to_string(), shape));
        }
    }

    fn count_macs(&mut self, n: usize) {
        if let Some(p) = self.probe.as_mut() {
            p.macs += n as u64;
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Every node's inputs have smaller indices than the node itself.
    pub fn is_topologically_ordered(&self) -> bool {
        self.nodes
            .iter()
            .enumerate()
            .all(|(i, n)| inputs_of(&n.op).iter().all(|v| v.0 < i))
    }

    pub fn leaf(&mut self, value: Tensor<T>, grad_enabled: bool) -> Var {
        self.push(value, Op::Leaf, grad_enabled)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- primitives ------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        self.count_macs(m * k * n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// `a + b` with `b` tiled along the row axis (bias rows, positional tables).
    pub fn add_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() || av.rows() % bv.rows() != 0 {
            return Err(Error::shape("add_rows", av.shape(), bv.shape()));
        }
        let bl = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv.data()[i % bl])
            .collect();
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::AddRows(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("mul", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let av = self.value(a);
        let t = Tensor::from_parts(
            av.shape().to_vec(),
            av.data().iter().map(|&x| x * s).collect(),
        );
        let rg = self.any_grad(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 2 {
            return Err(Error::shape("transpose", av.shape(), &[]));
        }
        let (m, n) = (av.shape()[0], av.shape()[1]);
        let out = transpose_data(av.data(), m, n);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a), rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (c, k) = (T::of(GELU_C), T::of(GELU_A));
        let half = T::of(0.5);
        let data = av
            .data()
            .iter()
            .map(|&x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()))
            .collect();
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.any_grad(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    /// Per-row normalization over the trailing axis followed by `gain`/`bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Parameter(format!("layernorm eps must be > 0, got {eps}")));
        }
        let xv = self.value(x);
        if xv.shape().is_empty() {
            return Err(Error::EmptyAxis("layernorm"));
        }
        let d = xv.cols();
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.len() != d || bv.len() != d {
            return Err(Error::shape("layernorm", xv.shape(), gv.shape()));
        }
        let rows = xv.rows();
        let dn = T::of(d as f64);
        let eps = T::of(eps);
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row-wise `softmax(x / temperature)`, max-subtracted.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if temperature.is_nan() || temperature <= 0.0 {
            return Err(Error::Parameter(format!(
                "softmax temperature must be > 0, got {temperature}"
            )));
        }
        let xv = self.value(x);
        let inv_temp = T::of(1.0 / temperature);
        let d = xv.cols();
        let mut out = vec![T::zero(); xv.len()];
        for (src, dst) in xv.data().chunks(d).zip(out.chunks_mut(d)) {
            softmax_row(src, dst, inv_temp);
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Softmax { x, inv_temp }, rg))
    }

    /// Multi-head scaled dot-product attention on packed `(batch*seq) x d`
    /// query/key/value rows. Returns the concatenated head outputs; the
    /// output projection is applied by the caller.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.shape().len() != 2 {
            return Err(Error::shape("attention", qv.shape(), kv.shape()));
        }
        let (rows, d) = (qv.shape()[0], qv.shape()[1]);
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(Error::Config(format!(
                "width {d} is not divisible into {} heads",
                spec.heads
            )));
        }
        if spec.seq_len == 0 || rows % spec.seq_len != 0 {
            return Err(Error::Config(format!(
                "{rows} rows do not pack into sequences of {}",
                spec.seq_len
            )));
        }
        let t = spec.seq_len;
        let dh = d / spec.heads;
        let batch = rows / t;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); batch * spec.heads * t * t];
        let mut out = vec![T::zero(); rows * d];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut scores = vec![T::zero(); t];
        for b in 0..batch {
            for h in 0..spec.heads {
                let p = &mut probs[(b * spec.heads + h) * t * t..][..t * t];
                for i in 0..t {
                    let qi = &qd[(b * t + i) * d + h * dh..][..dh];
                    let visible = match spec.mask {
                        Mask::None => t,
                        Mask::Causal => i + 1,
                    };
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &kd[(b * t + j) * d + h * dh..][..dh];
                        *s = dot(qi, kj) * scale;
                    }
                    let row = &mut p[i * t..(i + 1) * t];
                    softmax_row(&scores[..visible], &mut row[..visible], T::one());
                    let oi = &mut out[(b * t + i) * d + h * dh..][..dh];
                    for (j, &pij) in row.iter().enumerate() {
                        let vj = &vd[(b * t + j) * d + h * dh..][..dh];
                        for (o, &x) in oi.iter_mut().zip(vj) {
                            *o = *o + pij * x;
                        }
                    }
                }
            }
        }
        // scores and weighted sum: two T x T x d contractions per sequence
        self.count_macs(2 * batch * t * t * d);
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(
            Tensor::from_parts(vec![rows, d], out),
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
            rg,
        ))
    }

    /// Row lookup into an embedding table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(Error::shape("embedding", tv.shape(), &[]));
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Parameter(format!(
                "embedding index {bad} out of range for table of {vocab} rows"
            )));
        }
        if ids.is_empty() {
            return Err(Error::EmptyAxis("embedding"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tv.row(i));
        }
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenation along the token (row) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyAxis("concat_rows"))?;
        let d = self.value(first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != d || pv.shape().len() != 2 {
                return Err(Error::shape("concat_rows", self.value(first).shape(), pv.shape()));
            }
            rows += pv.rows();
            out.extend_from_slice(pv.data());
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::from_parts(vec![rows, d], out),
            Op::Concat(parts.to_vec()),
            rg,
        ))
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || start >= end || end > xv.rows() {
            return Err(Error::shape("slice_rows", xv.shape(), &[start, end]));
        }
        let d = xv.cols();
        let out = xv.data()[start * d..end * d].to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![end - start, d], out),
            Op::SliceRows { x, start },
            rg,
        ))
    }

    /// Rows picked by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || idx.is_empty() || idx.iter().any(|&i| i >= xv.rows()) {
            return Err(Error::shape("gather_rows", xv.shape(), idx));
        }
        let d = xv.cols();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(xv.row(i));
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), d], out),
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Each row divided by its Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        let tiny = T::of(1e-12);
        let mut inv_norm = Vec::with_capacity(xv.rows());
        let mut out = vec![T::zero(); xv.len()];
        for (src, dst) in xv.data().chunks(d).zip(out.chunks_mut(d)) {
            let inv = T::one() / dot(src, src).sqrt().max(tiny);
            inv_norm.push(inv);
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = v * inv;
            }
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.any_grad(&[x]);
        self.push(t, Op::L2Normalize { x, inv_norm }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().copied().sum::<T>() / T::of(xv.len() as f64);
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean softmax cross-entropy of `rows x classes` logits against targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let c = lv.cols();
        if lv.rows() != targets.len() || targets.iter().any(|&t| t >= c) {
            return Err(Error::shape("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = T::zero();
        for (r, (src, dst)) in lv.data().chunks(c).zip(probs.chunks_mut(c)).enumerate() {
            let m = src.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = src.iter().map(|&v| (v - m).exp()).sum();
            for (p, &v) in dst.iter_mut().zip(src) {
                *p = (v - m).exp() / z;
            }
            total = total + (z.ln() + m - src[targets[r]]);
        }
        let loss = total / T::of(targets.len() as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ---- reverse pass ----------------------------------------------------

    /// Reverse accumulation from a scalar loss. Does not mutate the tape, so
    /// repeated calls return identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    let bt = transpose_data(bv.data(), k, n);
                    let mut da = vec![T::zero(); m * k];
                    matmul_into(gy, &bt, &mut da, m, n, k);
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    for i in 0..m {
                        let gi = &gy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let s = av.data()[i * k + p];
                            axpy(&mut db[p * n..(p + 1) * n], s, gi);
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        accumulate(grads, *v, gy.to_vec());
                    }
                }
            }
            Op::AddRows(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, gy.to_vec());
                }
                if self.wants(*b) {
                    let bl = self.value(*b).len();
                    let mut db = vec![T::zero(); bl];
                    for (i, &g) in gy.iter().enumerate() {
                        db[i % bl] = db[i % bl] + g;
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = gy.iter().zip(bv.data()).map(|(&g, &x)| g * x).collect();
                    accumulate(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = gy.iter().zip(av.data()).map(|(&g, &x)| g * x).collect();
                    accumulate(grads, *b, d);
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    accumulate(grads, *a, gy.iter().map(|&g| g * *s).collect());
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    let (m, n) = (y.shape()[1], y.shape()[0]);
                    let mut da = vec![T::zero(); m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = gy[j * m + i];
                        }
                    }
                    accumulate(grads, *a, da);
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    let (c, k) = (T::of(GELU_C), T::of(GELU_A));
                    let half = T::of(0.5);
                    let three = T::of(3.0);
                    let d = self
                        .value(*a)
                        .data()
                        .iter()
                        .zip(gy)
                        .map(|(&x, &g)| {
                            let th = (c * (x + k * x * x * x)).tanh();
                            let dudx = c * (T::one() + three * k * x * x);
                            g * (half * (T::one() + th) + half * x * (T::one() - th * th) * dudx)
                        })
                        .collect();
                    accumulate(grads, *a, d);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = y.cols();
                let rows = y.rows();
                let g = self.value(*gain).data();
                if self.wants(*x) {
                    let dn = T::of(d as f64);
                    let mut dx = vec![T::zero(); rows * d];
                    for r in 0..rows {
                        let gr = &gy[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * g[j];
                            m1 = m1 + dh;
                            m2 = m2 + dh * hr[j];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for j in 0..d {
                            let dh = gr[j] * g[j];
                            dx[r * d + j] = rstd[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.wants(*gain) {
                    let mut dg = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] = dg[j] + gy[r * d + j] * xhat[r * d + j];
                        }
                    }
                    accumulate(grads, *gain, dg);
                }
                if self.wants(*bias) {
                    let mut db = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] = db[j] + gy[r * d + j];
                        }
                    }
                    accumulate(grads, *bias, db);
                }
            }
            Op::Softmax { x, inv_temp } => {
                if self.wants(*x) {
                    let d = y.cols();
                    let mut dx = vec![T::zero(); y.len()];
                    for ((yr, gr), dr) in y.data().chunks(d).zip(gy.chunks(d)).zip(dx.chunks_mut(d))
                    {
                        let s = dot(yr, gr);
                        for j in 0..d {
                            dr[j] = *inv_temp * yr[j] * (gr[j] - s);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => self.attention_backward(*q, *k, *v, spec, probs, gy, grads),
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let tv = self.value(*table);
                    let d = tv.cols();
                    let mut dt = vec![T::zero(); tv.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut dt[id * d..(id + 1) * d];
                        for (o, &g) in dst.iter_mut().zip(&gy[r * d..(r + 1) * d]) {
                            *o = *o + g;
                        }
                    }
                    accumulate(grads, *table, dt);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if self.wants(*p) {
                        accumulate(grads, *p, gy[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let d = xv.cols();
                    let mut dx = vec![T::zero(); xv.len()];
                    dx[start * d..start * d + gy.len()].copy_from_slice(gy);
                    accumulate(grads, *x, dx);
                }
            }
            Op::GatherRows { x, idx } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let d = xv.cols();
                    let mut dx = vec![T::zero(); xv.len()];
                    for (r, &i) in idx.iter().enumerate() {
                        let dst = &mut dx[i * d..(i + 1) * d];
                        for (o, &g) in dst.iter_mut().zip(&gy[r * d..(r + 1) * d]) {
                            *o = *o + g;
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::L2Normalize { x, inv_norm } => {
                if self.wants(*x) {
                    let d = y.cols();
                    let mut dx = vec![T::zero(); y.len()];
                    for (r, ((yr, gr), dr)) in y
                        .data()
                        .chunks(d)
                        .zip(gy.chunks(d))
                        .zip(dx.chunks_mut(d))
                        .enumerate()
                    {
                        let s = dot(yr, gr);
                        for j in 0..d {
                            dr[j] = (gr[j] - yr[j] * s) * inv_norm[r];
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    accumulate(grads, *x, vec![gy[0]; self.value(*x).len()]);
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let n = self.value(*x).len();
                    accumulate(grads, *x, vec![gy[0] / T::of(n as f64); n]);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.wants(*logits) {
                    let c = self.value(*logits).cols();
                    let scale = gy[0] / T::of(targets.len() as f64);
                    let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        dl[r * c + t] = dl[r * c + t] - scale;
                    }
                    accumulate(grads, *logits, dl);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[T],
        gy: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = (qv.shape()[0], qv.shape()[1]);
        let t = spec.seq_len;
        let dh = d / spec.heads;
        let batch = rows / t;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (want_q, want_k, want_v) = (self.wants(q), self.wants(k), self.wants(v));
        let mut dq = vec![T::zero(); rows * d];
        let mut dk = vec![T::zero(); rows * d];
        let mut dv = vec![T::zero(); rows * d];
        let mut dp = vec![T::zero(); t];
        for b in 0..batch {
            for h in 0..spec.heads {
                let p = &probs[(b * spec.heads + h) * t * t..][..t * t];
                for i in 0..t {
                    let gi = &gy[(b * t + i) * d + h * dh..][..dh];
                    let pi = &p[i * t..(i + 1) * t];
                    // dP_ij = dO_i . V_j ; dV_j += P_ij dO_i
                    for j in 0..t {
                        let off = (b * t + j) * d + h * dh;
                        dp[j] = dot(gi, &vv.data()[off..off + dh]);
                        if want_v && pi[j] != T::zero() {
                            axpy(&mut dv[off..off + dh], pi[j], gi);
                        }
                    }
                    if !(want_q || want_k) {
                        continue;
                    }
                    let s = dot(pi, &dp);
                    let qoff = (b * t + i) * d + h * dh;
                    for j in 0..t {
                        if pi[j] == T::zero() {
                            continue;
                        }
                        let ds = pi[j] * (dp[j] - s) * scale;
                        let koff = (b * t + j) * d + h * dh;
                        if want_q {
                            axpy(&mut dq[qoff..qoff + dh], ds, &kv.data()[koff..koff + dh]);
                        }
                        if want_k {
                            axpy(&mut dk[koff..koff + dh], ds, &qv.data()[qoff..qoff + dh]);
                        }
                    }
                }
            }
        }
        if want_q {
            accumulate(grads, q, dq);
        }
        if want_k {
            accumulate(grads, k, dk);
        }
        if want_v {
            accumulate(grads, v, dv);
        }
    }
}

fn inputs_of<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRows(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Transpose(a)
        | Op::Gelu(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Softmax { x: a, .. }
        | Op::SliceRows { x: a, .. }
        | Op::GatherRows { x: a, .. }
        | Op::L2Normalize { x: a, .. }
        | Op::CrossEntropy { logits: a, .. }
        | Op::Embedding { table: a, .. } => vec![*a],
        Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        Op::Concat(parts) => parts.clone(),
    }
}

/// Gradients produced by one reverse sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Raw gradient if the node was reached by the reverse sweep.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// dLoss/dv as a tensor; zeros for nodes the loss does not depend on.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape.clone(), g.clone()),
            None => Tensor::zeros(shape),
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

#[inline]
/// Inner product with eight fixed accumulator lanes, summed in a fixed order.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a[..n].chunks_exact(8), b[..n].chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] = lanes[l] + x[l] * y[l];
        }
    }
    let mut s = ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5]))
        + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s = s + x * y;
    }
    s
}

#[inline]
fn axpy<T: Real>(dst: &mut [T], a: T, x: &[T]) {
    for (d, &v) in dst.iter_mut().zip(x) {
        *d = *d + a * v;
    }
}

fn transpose_data<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn matmul_into<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let oi = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(oi, a[i * k + p], &b[p * n..(p + 1) * n]);
        }
    }
}

fn softmax_row<T: Real>(src: &[T], dst: &mut [T], inv_temp: T) {
    let m = src.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = ((s - m) * inv_temp).exp();
        z = z + *d;
    }
    for d in dst.iter_mut() {
        *d = *d / z;
    }
}
