//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only list of nodes. Node ids are handed out in
//! creation order, which is already a topological order, so backward is a
//! single reverse sweep. One graph is built per minibatch and dropped after
//! the optimizer step.

use std::collections::BTreeMap;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Scalar, Tensor};

/// Denominator guard for cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;
/// Variance guard for batch normalization.
pub const BN_EPS: f64 = 1e-5;
/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive kinds a node can be built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Input,
    Param,
    MatMul,
    Add,
    Relu,
    Sigmoid,
    SoftmaxRows,
    MeanRows,
    ConcatLastAxis,
    ConcatRows,
    Scale,
    RowL2Norms,
    CosineMatrix,
    BatchNorm,
    NoisyOr,
    Bce,
}

enum Op<T> {
    Input,
    Param(String),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    MeanRows(NodeId),
    ConcatLast(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Scale(NodeId, T),
    RowL2Norms(NodeId),
    Cosine(NodeId, NodeId),
    BatchNorm { input: NodeId, inv_std: Vec<T>, batch: bool },
    NoisyOr { input: NodeId, groups: Vec<Range<usize>> },
    Bce { input: NodeId, targets: Vec<T> },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Param(_) => OpKind::Param,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::MeanRows(_) => OpKind::MeanRows,
            Op::ConcatLast(_) => OpKind::ConcatLastAxis,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::Scale(..) => OpKind::Scale,
            Op::RowL2Norms(_) => OpKind::RowL2Norms,
            Op::Cosine(..) => OpKind::CosineMatrix,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::NoisyOr { .. } => OpKind::NoisyOr,
            Op::Bce { .. } => OpKind::Bce,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Batch statistics observed by a training-mode batch-norm node.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, the estimate folded into running statistics.
    pub var: Vec<T>,
}

pub enum NormStats<'a, T> {
    /// Normalize with statistics of the current batch.
    Batch,
    /// Normalize with fixed (running) statistics.
    Fixed { mean: &'a [T], var: &'a [T] },
}

/// Gradients of a scalar loss, keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T: Scalar> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }
}

#[derive(Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

fn dims2<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn matmul_kernel<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    par::for_each_row(&mut out, n, k * n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            let br = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o = *o + av * bv;
            }
        }
    });
    out
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    /// Ids of the nodes `id` was computed from.
    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        match &self.nodes[id.0].op {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Cosine(a, b) => vec![*a, *b],
            Op::Relu(a) | Op::Sigmoid(a) | Op::SoftmaxRows(a) | Op::MeanRows(a) | Op::RowL2Norms(a) => vec![*a],
            Op::Scale(a, _) => vec![*a],
            Op::ConcatLast(v) | Op::ConcatRows(v) => v.clone(),
            Op::BatchNorm { input, .. } | Op::NoisyOr { input, .. } | Op::Bce { input, .. } => vec![*input],
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        let tracked = match &op {
            Op::Input => false,
            Op::Param(_) => true,
            _ => self.parents_of(&op).iter().any(|p| self.nodes[p.0].tracked),
        };
        self.nodes.push(Node { value, op, tracked });
        NodeId(self.nodes.len() - 1)
    }

    fn parents_of(&self, op: &Op<T>) -> Vec<NodeId> {
        match op {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Cosine(a, b) => vec![*a, *b],
            Op::Relu(a) | Op::Sigmoid(a) | Op::SoftmaxRows(a) | Op::MeanRows(a) | Op::RowL2Norms(a) => vec![*a],
            Op::Scale(a, _) => vec![*a],
            Op::ConcatLast(v) | Op::ConcatRows(v) => v.clone(),
            Op::BatchNorm { input, .. } | Op::NoisyOr { input, .. } | Op::Bce { input, .. } => vec![*input],
        }
    }

    /// A constant leaf. Never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Input)
    }

    /// A differentiable leaf whose gradient is reported under `name`.
    ///
    /// Input features can be registered this way too when their gradient is wanted.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Param(name.to_string()))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = dims2(self.value(a));
        let (k2, n) = dims2(self.value(b));
        if k != k2 || self.value(b).rank() != 2 {
            return Err(Error::shape("matmul", format!("[{m}x{k}] x {:?}", self.value(b).shape())));
        }
        let out = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    /// Elementwise sum. `b` may also be a single row broadcast over the rows of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, n) = dims2(va);
        let broadcast = vb.numel() == n && vb.rows() == 1 && m > 1;
        if va.shape() != vb.shape() && !broadcast {
            return Err(Error::shape("add", format!("{:?} + {:?}", va.shape(), vb.shape())));
        }
        let bd = vb.data();
        let out: Vec<T> = va.data().iter().enumerate().map(|(i, &x)| x + bd[i % bd.len()]).collect();
        let shape = va.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b)))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let out = v.data().iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        let t = Tensor::new(v.shape().to_vec(), out).unwrap();
        self.push(t, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let out = v.data().iter().map(|&x| sigmoid(x)).collect();
        let t = Tensor::new(v.shape().to_vec(), out).unwrap();
        self.push(t, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let (m, n) = dims2(v);
        let mut out = v.data().to_vec();
        for r in 0..m {
            let row = &mut out[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum = sum + *x;
            }
            row.iter_mut().for_each(|x| *x = *x / sum);
        }
        let t = Tensor::new(v.shape().to_vec(), out).unwrap();
        self.push(t, Op::SoftmaxRows(a))
    }

    /// `[n x d] -> [1 x d]`.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).mean_rows();
        self.push(t, Op::MeanRows(a))
    }

    pub fn concat_last_axis(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_last_axis", "no inputs"));
        };
        let m = self.value(first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != m) {
            let shapes: Vec<_> = parts.iter().map(|&p| self.value(p).shape().to_vec()).collect();
            return Err(Error::shape("concat_last_axis", format!("row counts differ: {shapes:?}")));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        Ok(self.push(Tensor::new(vec![m, total], out)?, Op::ConcatLast(parts.to_vec())))
    }

    /// Stacks 2-D inputs with equal column counts.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_rows", "no inputs"));
        };
        let n = self.value(first).cols();
        if parts.iter().any(|&p| self.value(p).cols() != n) {
            let shapes: Vec<_> = parts.iter().map(|&p| self.value(p).shape().to_vec()).collect();
            return Err(Error::shape("concat_rows", format!("column counts differ: {shapes:?}")));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let m = out.len() / n;
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::ConcatRows(parts.to_vec())))
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let v = self.value(a);
        let out = v.data().iter().map(|&x| x * factor).collect();
        let t = Tensor::new(v.shape().to_vec(), out).unwrap();
        self.push(t, Op::Scale(a, factor))
    }

    /// `[m x d] -> [m x 1]` Euclidean row norms.
    pub fn row_l2_norms(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let m = v.rows();
        let out = (0..m).map(|r| v.row_slice(r).iter().map(|&x| x * x).sum::<T>().sqrt()).collect();
        let t = Tensor::new(vec![m, 1], out).unwrap();
        self.push(t, Op::RowL2Norms(a))
    }

    /// Pairwise cosine similarity between the rows of `a` `[m x d]` and `b` `[n x d]`.
    ///
    /// The denominator is `max(|a_i| |b_j|, COSINE_EPS)`, so zero rows give zero similarity.
    pub fn cosine_matrix(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, d) = dims2(va);
        let (n, d2) = dims2(vb);
        if d != d2 || va.rank() != 2 || vb.rank() != 2 {
            return Err(Error::shape("cosine_matrix", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let na = norms(va);
        let nb = norms(vb);
        let eps = T::lit(COSINE_EPS);
        let mut out = vec![T::zero(); m * n];
        par::for_each_row(&mut out, n, n * d, |i, row| {
            let ar = va.row_slice(i);
            for (j, o) in row.iter_mut().enumerate() {
                let dot: T = ar.iter().zip(vb.row_slice(j)).map(|(&x, &y)| x * y).sum();
                *o = dot / (na[i] * nb[j]).max(eps);
            }
        });
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Cosine(a, b)))
    }

    /// Per-feature normalization of a `[n x f]` batch (no affine transform).
    ///
    /// With [`NormStats::Batch`] the batch needs at least two rows and the
    /// observed statistics are returned so the caller can fold them into
    /// running estimates.
    pub fn batchnorm(&mut self, a: NodeId, stats: NormStats<'_, T>) -> Result<(NodeId, Option<BatchStats<T>>)> {
        let v = self.value(a);
        let (m, f) = dims2(v);
        let eps = T::lit(BN_EPS);
        let (mean, var_biased, observed) = match stats {
            NormStats::Batch => {
                if m < 2 {
                    return Err(Error::shape("batchnorm", format!("training batch needs >= 2 rows, got {m}")));
                }
                let mut mean = vec![T::zero(); f];
                for r in 0..m {
                    for (s, &x) in mean.iter_mut().zip(v.row_slice(r)) {
                        *s = *s + x;
                    }
                }
                let nm = T::from_usize(m).unwrap();
                mean.iter_mut().for_each(|s| *s = *s / nm);
                let mut var = vec![T::zero(); f];
                for r in 0..m {
                    for ((s, &x), &mu) in var.iter_mut().zip(v.row_slice(r)).zip(&mean) {
                        *s = *s + (x - mu) * (x - mu);
                    }
                }
                var.iter_mut().for_each(|s| *s = *s / nm);
                let unbiased = var.iter().map(|&s| s * nm / (nm - T::one())).collect();
                let obs = BatchStats { mean: mean.clone(), var: unbiased };
                (mean, var, Some(obs))
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != f || var.len() != f {
                    return Err(Error::shape("batchnorm", format!("{f} features vs {} running stats", mean.len())));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var_biased.iter().map(|&s| T::one() / (s + eps).sqrt()).collect();
        let mut out = v.data().to_vec();
        for r in 0..m {
            for (c, x) in out[r * f..(r + 1) * f].iter_mut().enumerate() {
                *x = (*x - mean[c]) * inv_std[c];
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let batch = observed.is_some();
        Ok((self.push(t, Op::BatchNorm { input: a, inv_std, batch }), observed))
    }

    /// Noisy-OR over groups of rows of an `[n x 1]` probability column:
    /// `p_g = 1 - prod_{i in g} (1 - p_i)`, accumulated in log space with each
    /// `p_i` clamped to at most `1 - PROB_EPS`.
    pub fn noisy_or(&mut self, a: NodeId, groups: &[Range<usize>]) -> Result<NodeId> {
        let v = self.value(a);
        let n = v.numel();
        if v.cols() != 1 {
            return Err(Error::shape("noisy_or", format!("expects a column, got {:?}", v.shape())));
        }
        if groups.iter().any(|g| g.is_empty() || g.end > n) {
            return Err(Error::shape("noisy_or", format!("group out of range for {n} scores")));
        }
        let cap = T::one() - T::lit(PROB_EPS);
        let out = groups
            .iter()
            .map(|g| {
                let log_miss: T = v.data()[g.clone()].iter().map(|&p| (-p.min(cap)).ln_1p()).sum();
                -log_miss.exp_m1()
            })
            .collect();
        let t = Tensor::new(vec![groups.len(), 1], out)?;
        Ok(self.push(t, Op::NoisyOr { input: a, groups: groups.to_vec() }))
    }

    /// Summed binary cross-entropy of a probability column against 0/1 targets.
    pub fn bce(&mut self, a: NodeId, targets: &[T]) -> Result<NodeId> {
        let v = self.value(a);
        if v.numel() != targets.len() {
            return Err(Error::shape("bce", format!("{} predictions vs {} targets", v.numel(), targets.len())));
        }
        let lo = T::lit(PROB_EPS);
        let hi = T::one() - lo;
        let loss: T = v
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &y)| {
                let c = p.max(lo).min(hi);
                -(y * c.ln() + (T::one() - y) * (T::one() - c).ln())
            })
            .sum();
        Ok(self.push(Tensor::scalar(loss), Op::Bce { input: a, targets: targets.to_vec() }))
    }

    /// Reverse sweep from a scalar `loss`, returning gradients of every `param` leaf reached.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        let mut out = Gradients::default();
        if !self.nodes[loss.0].tracked {
            return Ok(out);
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Param(name) = &node.op {
                match out.map.get_mut(name) {
                    Some(existing) => accumulate(existing, &g),
                    None => {
                        out.map.insert(name.clone(), g);
                    }
                }
                continue;
            }
            for (parent, contrib) in self.local_grads(idx, &g) {
                if !self.nodes[parent.0].tracked {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(existing) => accumulate(existing, &contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(out)
    }

    fn local_grads(&self, idx: usize, g: &Tensor<T>) -> Vec<(NodeId, Tensor<T>)> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let gd = g.data();
        let shaped = |like: &Tensor<T>, data: Vec<T>| Tensor::new(like.shape().to_vec(), data).unwrap();
        match &node.op {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = dims2(va);
                let n = vb.cols();
                let mut res = Vec::with_capacity(2);
                if self.nodes[a.0].tracked {
                    // dA = dC . B^T
                    let mut da = vec![T::zero(); m * k];
                    par::for_each_row(&mut da, k, k * n, |i, row| {
                        let gr = &gd[i * n..(i + 1) * n];
                        for (p, o) in row.iter_mut().enumerate() {
                            *o = gr.iter().zip(vb.row_slice(p)).map(|(&x, &w)| x * w).sum();
                        }
                    });
                    res.push((*a, shaped(va, da)));
                }
                if self.nodes[b.0].tracked {
                    // dB = A^T . dC
                    let mut db = vec![T::zero(); k * n];
                    par::for_each_row(&mut db, n, m * n, |p, row| {
                        for i in 0..m {
                            let av = va.data()[i * k + p];
                            for (o, &x) in row.iter_mut().zip(&gd[i * n..(i + 1) * n]) {
                                *o = *o + av * x;
                            }
                        }
                    });
                    res.push((*b, shaped(vb, db)));
                }
                res
            }
            Op::Add(a, b) => {
                let vb = self.value(*b);
                let db = if vb.numel() == gd.len() {
                    gd.to_vec()
                } else {
                    let n = vb.numel();
                    let mut s = vec![T::zero(); n];
                    for row in gd.chunks(n) {
                        for (o, &x) in s.iter_mut().zip(row) {
                            *o = *o + x;
                        }
                    }
                    s
                };
                vec![(*a, g.clone()), (*b, shaped(vb, db))]
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = gd.iter().zip(x.data()).map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() }).collect();
                vec![(*a, shaped(x, d))]
            }
            Op::Sigmoid(a) => {
                let d = gd.iter().zip(y.data()).map(|(&gv, &s)| gv * s * (T::one() - s)).collect();
                vec![(*a, shaped(y, d))]
            }
            Op::SoftmaxRows(a) => {
                let n = y.cols();
                let mut d = vec![T::zero(); gd.len()];
                for ((dr, gr), yr) in d.chunks_mut(n).zip(gd.chunks(n)).zip(y.data().chunks(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(&gv, &s)| gv * s).sum();
                    for ((o, &gv), &s) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = s * (gv - dot);
                    }
                }
                vec![(*a, shaped(y, d))]
            }
            Op::MeanRows(a) => {
                let x = self.value(*a);
                let m = x.rows();
                let inv = T::one() / T::from_usize(m).unwrap();
                let mut d = Vec::with_capacity(x.numel());
                for _ in 0..m {
                    d.extend(gd.iter().map(|&gv| gv * inv));
                }
                vec![(*a, shaped(x, d))]
            }
            Op::ConcatLast(parts) => {
                let total = y.cols();
                let m = y.rows();
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let pv = self.value(p);
                    let c = pv.cols();
                    let mut d = Vec::with_capacity(m * c);
                    for r in 0..m {
                        d.extend_from_slice(&gd[r * total + offset..r * total + offset + c]);
                    }
                    offset += c;
                    res.push((p, shaped(pv, d)));
                }
                res
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.numel();
                    res.push((p, shaped(pv, gd[offset..offset + n].to_vec())));
                    offset += n;
                }
                res
            }
            Op::Scale(a, f) => {
                let d = gd.iter().map(|&gv| gv * *f).collect();
                vec![(*a, shaped(y, d))]
            }
            Op::RowL2Norms(a) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut d = vec![T::zero(); x.numel()];
                for r in 0..x.rows() {
                    let nrm = y.data()[r];
                    if nrm > T::zero() {
                        for (o, &xv) in d[r * c..(r + 1) * c].iter_mut().zip(x.row_slice(r)) {
                            *o = gd[r] * xv / nrm;
                        }
                    }
                }
                vec![(*a, shaped(x, d))]
            }
            Op::Cosine(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, dim) = dims2(va);
                let n = vb.rows();
                let na = norms(va);
                let nb = norms(vb);
                let eps = T::lit(COSINE_EPS);
                let cos = y.data();
                let mut res = Vec::with_capacity(2);
                if self.nodes[a.0].tracked {
                    let mut da = vec![T::zero(); m * dim];
                    par::for_each_row(&mut da, dim, n * dim, |i, row| {
                        let ar = va.row_slice(i);
                        for j in 0..n {
                            let gij = gd[i * n + j];
                            let denom = na[i] * nb[j];
                            let br = vb.row_slice(j);
                            if denom > eps {
                                let c = cos[i * n + j];
                                let na2 = na[i] * na[i];
                                for ((o, &bv), &av) in row.iter_mut().zip(br).zip(ar) {
                                    *o = *o + gij * (bv / denom - c * av / na2);
                                }
                            } else {
                                for (o, &bv) in row.iter_mut().zip(br) {
                                    *o = *o + gij * bv / eps;
                                }
                            }
                        }
                    });
                    res.push((*a, shaped(va, da)));
                }
                if self.nodes[b.0].tracked {
                    let mut db = vec![T::zero(); n * dim];
                    par::for_each_row(&mut db, dim, m * dim, |j, row| {
                        let br = vb.row_slice(j);
                        for i in 0..m {
                            let gij = gd[i * n + j];
                            let denom = na[i] * nb[j];
                            let ar = va.row_slice(i);
                            if denom > eps {
                                let c = cos[i * n + j];
                                let nb2 = nb[j] * nb[j];
                                for ((o, &av), &bv) in row.iter_mut().zip(ar).zip(br) {
                                    *o = *o + gij * (av / denom - c * bv / nb2);
                                }
                            } else {
                                for (o, &av) in row.iter_mut().zip(ar) {
                                    *o = *o + gij * av / eps;
                                }
                            }
                        }
                    });
                    res.push((*b, shaped(vb, db)));
                }
                res
            }
            Op::BatchNorm { input, inv_std, batch } => {
                let f = y.cols();
                let m = y.rows();
                let mut d = vec![T::zero(); gd.len()];
                if *batch {
                    let nm = T::from_usize(m).unwrap();
                    let mut sum_g = vec![T::zero(); f];
                    let mut sum_gx = vec![T::zero(); f];
                    for r in 0..m {
                        for c in 0..f {
                            let gv = gd[r * f + c];
                            sum_g[c] = sum_g[c] + gv;
                            sum_gx[c] = sum_gx[c] + gv * y.data()[r * f + c];
                        }
                    }
                    for r in 0..m {
                        for c in 0..f {
                            let xhat = y.data()[r * f + c];
                            d[r * f + c] = inv_std[c] / nm * (nm * gd[r * f + c] - sum_g[c] - xhat * sum_gx[c]);
                        }
                    }
                } else {
                    for r in 0..m {
                        for c in 0..f {
                            d[r * f + c] = gd[r * f + c] * inv_std[c];
                        }
                    }
                }
                vec![(*input, shaped(y, d))]
            }
            Op::NoisyOr { input, groups } => {
                let x = self.value(*input);
                let cap = T::one() - T::lit(PROB_EPS);
                let mut d = vec![T::zero(); x.numel()];
                for (gi, grp) in groups.iter().enumerate() {
                    let miss = T::one() - y.data()[gi];
                    for i in grp.clone() {
                        let p = x.data()[i];
                        if p < cap {
                            d[i] = d[i] + gd[gi] * miss / (T::one() - p);
                        }
                    }
                }
                vec![(*input, shaped(x, d))]
            }
            Op::Bce { input, targets } => {
                let x = self.value(*input);
                let lo = T::lit(PROB_EPS);
                let hi = T::one() - lo;
                let d = x
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&p, &t)| {
                        if p < lo || p > hi {
                            T::zero()
                        } else {
                            gd[0] * (-t / p + (T::one() - t) / (T::one() - p))
                        }
                    })
                    .collect();
                vec![(*input, shaped(x, d))]
            }
        }
    }
}

fn norms<T: Scalar>(t: &Tensor<T>) -> Vec<T> {
    (0..t.rows()).map(|r| t.row_slice(r).iter().map(|&x| x * x).sum::<T>().sqrt()).collect()
}

fn accumulate<T: Scalar>(into: &mut Tensor<T>, g: &Tensor<T>) {
    for (o, &x) in into.data_mut().iter_mut().zip(g.data()) {
        *o = *o + x;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.input(t(&[vec![0.0, 0.0, 0.0]]));
        let y = g.softmax_rows(x);
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_midpoint_and_derivative() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(0.0f64));
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).data(), &[0.5]);
        let grads = g.backward(y).unwrap();
        assert!((grads.get("x").unwrap().data()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn cosine_against_orthonormal_basis() {
        let mut g = Graph::new();
        let a = g.input(t(&[vec![1.0, 0.0]]));
        let b = g.input(t(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let c = g.cosine_matrix(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 0.0]);
    }

    #[test]
    fn cosine_zero_row_is_not_an_error() {
        let mut g = Graph::new();
        let a = g.param("a", t(&[vec![0.0, 0.0]]));
        let b = g.input(t(&[vec![1.0, 2.0]]));
        let c = g.cosine_matrix(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[0.0]);
        let s = g.mean_rows(c);
        let grads = g.backward(s).unwrap();
        assert!(grads.get("a").unwrap().is_finite());
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        let c = g.input(Tensor::zeros(&[2, 4]));
        assert!(g.cosine_matrix(a, c).unwrap_err().to_string().contains("cosine_matrix"));
        assert!(g.add(a, c).is_err());
        let d = g.input(Tensor::zeros(&[3, 3]));
        assert!(g.concat_last_axis(&[a, d]).is_err());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let a = g.param("a", Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(a), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constant_graph_has_no_gradients() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::full(&[2, 2], 1.0));
        let b = g.input(Tensor::full(&[2, 1], 1.0));
        let c = g.matmul(a, b).unwrap();
        let l = g.mean_rows(c);
        assert!(g.backward(l).unwrap().is_empty());
    }

    #[test]
    fn row_broadcast_add_sums_bias_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[3, 2]));
        let b = g.param("b", Tensor::row(vec![1.0, 2.0]));
        let y = g.add(x, b).unwrap();
        let m = g.mean_rows(y);
        let w = g.input(t(&[vec![1.0], vec![1.0]]));
        let l = g.matmul(m, w).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get("b").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn batchnorm_requires_two_rows_in_training() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[1, 4]));
        assert!(g.batchnorm(x, NormStats::Batch).is_err());
        let (y, stats) = g.batchnorm(x, NormStats::Fixed { mean: &[0.0; 4], var: &[1.0; 4] }).unwrap();
        assert!(stats.is_none());
        assert_eq!(g.value(y).shape(), &[1, 4]);
    }

    #[test]
    fn noisy_or_groups() {
        let mut g = Graph::<f64>::new();
        let p = g.input(Tensor::new(vec![3, 1], vec![0.5, 0.5, 0.2]).unwrap());
        let q = g.noisy_or(p, &[0..2, 2..3]).unwrap();
        let v = g.value(q).data();
        assert!((v[0] - 0.75).abs() < 1e-12);
        assert!((v[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn bce_matches_closed_form() {
        let mut g = Graph::<f64>::new();
        let p = g.input(Tensor::new(vec![2, 1], vec![0.5, 0.75]).unwrap());
        let l = g.bce(p, &[1.0, 0.0]).unwrap();
        let expected = 2f64.ln() + 4f64.ln();
        assert!((g.value(l).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn parents_record_structure() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(&[1, 2]));
        let b = g.param("b", Tensor::zeros(&[2, 2]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.parents(c), vec![a, b]);
        assert_eq!(g.kind(c), OpKind::MatMul);
    }
}
