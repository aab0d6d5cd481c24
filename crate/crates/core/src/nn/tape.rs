use std::collections::HashMap;

use super::{NnError, ParamId, ParamStore, Tensor};
use crate::scalar::Scalar;

const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Input,
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
    SegmentMean {
        x: Var,
        segments: Vec<usize>,
    },
    GatherRows {
        table: Var,
        index: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<usize>,
        heads: usize,
        probs: Vec<Vec<S>>,
    },
    Sum(Var),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// Nodes are appended in creation order; [`Tape::backward`] visits them in
/// reverse, each exactly once.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    params: HashMap<ParamId, Var>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> NnError {
    NnError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn check_segments(op: &'static str, segments: &[usize], rows: usize) -> Result<(), NnError> {
    if segments.is_empty() || segments.contains(&0) || segments.iter().sum::<usize>() != rows {
        return Err(NnError::Segments {
            op,
            segments: segments.to_vec(),
            rows,
        });
    }
    Ok(())
}

fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    // tanh approximation
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = S::lit(0.044715);
    let half = S::lit(0.5);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let value = half * x * (S::one() + t);
    let deriv = half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::lit(3.0) * k * x * x);
    (value, deriv)
}

/// Split `shape` around `axis` into (outer, extent, inner).
fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize), NnError> {
    if axis >= shape.len() {
        return Err(NnError::Axis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numerically stabilised softmax along `axis` (max subtracted first).
pub fn softmax<S: Scalar>(x: &Tensor<S>, axis: usize) -> Result<Tensor<S>, NnError> {
    let (outer, n, inner) = axis_layout(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![S::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let max = (0..n).map(|j| src[at(j)]).fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for j in 0..n {
                let e = (src[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..n {
                out[at(j)] /= total;
            }
        }
    }
    Tensor::checked("softmax", x.shape().to_vec(), out)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input: never receives a gradient.
    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Free variable that receives a gradient but is not a registered parameter.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records parameter `id`; repeated calls return the same node so that
    /// every use accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// Records parameter `id` as a constant (inference, no gradient).
    pub fn frozen_param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Input, false);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(mismatch("matmul", av, bv));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            S::one(),
            av.data(),
            (k as isize, 1),
            bv.data(),
            (n as isize, 1),
            S::zero(),
            &mut out,
            (n as isize, 1),
        );
        let value = Tensor::checked("matmul", vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("add", av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::checked("add", av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// `x[r, c] + bias[c]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NnError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(mismatch("add_row", xv, bv));
        }
        let c = xv.cols();
        let b = bv.data();
        let data = xv.data().iter().enumerate().map(|(i, &v)| v + b[i % c]).collect();
        let value = Tensor::checked("add_row", xv.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddRow(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("mul", av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::checked("mul", av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var, NnError> {
        let value = Tensor::checked("scale", self.value(x).shape().to_vec(), self.value(x).data().iter().map(|&v| v * c).collect())?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Scale(x, c), rg))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, NnError> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu_parts(v).0).collect();
        let value = Tensor::checked("gelu", xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Gelu(x), rg))
    }

    /// Row-wise layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NnError> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let c = xv.cols();
        if gv.len() != c {
            return Err(mismatch("layernorm", xv, gv));
        }
        if bv.len() != c {
            return Err(mismatch("layernorm", xv, bv));
        }
        let rows = xv.rows();
        let eps = S::lit(LAYERNORM_EPS);
        let cs = S::from_usize(c).unwrap();
        let mut xhat = vec![S::zero(); rows * c];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); rows * c];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<S>() / cs;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / cs;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::checked("layernorm", xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NnError> {
        let value = softmax(self.value(x), axis)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits [B×C]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, NnError> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.rows() != labels.len() {
            return Err(NnError::ShapeMismatch {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let classes = lv.cols();
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(NnError::LabelOutOfRange { label, classes });
        }
        let probs = softmax(lv, 1)?;
        let mut total = 0.0f64;
        for (r, &label) in labels.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
            total += (lse - row[label]).f64();
        }
        let mean = S::lit(total / labels.len() as f64);
        let value = Tensor::checked("cross_entropy", vec![1], vec![mean])?;
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs: probs.into_data(),
            },
            rg,
        ))
    }

    /// Mean of each contiguous row segment: `[n×d] -> [segments×d]`.
    pub fn segment_mean(&mut self, x: Var, segments: &[usize]) -> Result<Var, NnError> {
        let xv = self.value(x);
        check_segments("segment_mean", segments, xv.rows())?;
        let d = xv.cols();
        let mut out = vec![S::zero(); segments.len() * d];
        let mut start = 0;
        for (s, &len) in segments.iter().enumerate() {
            let dst = &mut out[s * d..(s + 1) * d];
            for r in start..start + len {
                for (o, &v) in dst.iter_mut().zip(xv.row(r)) {
                    *o += v;
                }
            }
            let inv = S::one() / S::from_usize(len).unwrap();
            dst.iter_mut().for_each(|o| *o *= inv);
            start += len;
        }
        let value = Tensor::checked("segment_mean", vec![segments.len(), d], out)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::SegmentMean {
                x,
                segments: segments.to_vec(),
            },
            rg,
        ))
    }

    /// Row lookup `table[index[i]]`.
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var, NnError> {
        let tv = self.value(table);
        let (rows, d) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in index {
            if i >= rows {
                return Err(NnError::IndexOutOfRange { index: i, rows });
            }
            out.extend_from_slice(tv.row(i));
        }
        let value = Tensor::checked("gather_rows", vec![index.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention restricted to contiguous row
    /// segments (block-diagonal mask). Rows in different segments never
    /// interact, which is exactly an additive −∞ bias outside the blocks.
    pub fn segment_attention(&mut self, q: Var, k: Var, v: Var, segments: &[usize], heads: usize) -> Result<Var, NnError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() {
            return Err(mismatch("attention", qv, kv));
        }
        if qv.shape() != vv.shape() {
            return Err(mismatch("attention", qv, vv));
        }
        let (n, d) = (qv.rows(), qv.cols());
        check_segments("attention", segments, n)?;
        if heads == 0 || d % heads != 0 {
            return Err(NnError::ShapeMismatch {
                op: "attention",
                lhs: qv.shape().to_vec(),
                rhs: vec![heads],
            });
        }
        let dh = d / heads;
        let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
        let ds = d as isize;
        let mut out = vec![S::zero(); n * d];
        let mut probs = Vec::with_capacity(segments.len() * heads);
        let mut start = 0;
        for &len in segments {
            for h in 0..heads {
                let off = start * d + h * dh;
                let mut scores = vec![S::zero(); len * len];
                S::gemm(
                    len,
                    dh,
                    len,
                    scale,
                    &qv.data()[off..],
                    (ds, 1),
                    &kv.data()[off..],
                    (1, ds),
                    S::zero(),
                    &mut scores,
                    (len as isize, 1),
                );
                for row in scores.chunks_mut(len) {
                    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
                    let mut total = S::zero();
                    for s in row.iter_mut() {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    row.iter_mut().for_each(|s| *s /= total);
                }
                S::gemm(
                    len,
                    len,
                    dh,
                    S::one(),
                    &scores,
                    (len as isize, 1),
                    &vv.data()[off..],
                    (ds, 1),
                    S::zero(),
                    &mut out[off..],
                    (ds, 1),
                );
                probs.push(scores);
            }
            start += len;
        }
        let value = Tensor::checked("attention", vec![n, d], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NnError> {
        let value = Tensor::checked("sum", vec![1], vec![self.value(x).sum()])?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Sum(x), rg))
    }

    /// Linear layer `x·w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NnError> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Reverse sweep from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>, NnError> {
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![S::one(); self.nodes[root.0].value.len()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf | Op::Param) {
                grads[i] = Some(g);
            }
        }
        let mut out = Vec::with_capacity(self.nodes.len());
        for (i, g) in grads.into_iter().enumerate() {
            out.push(match g {
                Some(data) => Some(Tensor::checked("backward", self.nodes[i].value.shape().to_vec(), data)?),
                None => None,
            });
        }
        Ok(Gradients {
            grads: out,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) -> Result<(), NnError> {
        fn slot<'g, S: Scalar>(nodes: &[Node<S>], grads: &'g mut [Option<Vec<S>>], v: Var) -> Option<&'g mut Vec<S>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            let len = nodes[v.0].value.len();
            Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); len]))
        }
        let nodes = &self.nodes;
        match &node.op {
            Op::Input | Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if let Some(ga) = slot(nodes, grads, *a) {
                    // dA = dC · Bᵀ
                    S::gemm(m, n, k, S::one(), g, (n as isize, 1), bv.data(), (1, n as isize), S::one(), ga, (k as isize, 1));
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    // dB = Aᵀ · dC
                    S::gemm(k, m, n, S::one(), av.data(), (1, k as isize), g, (n as isize, 1), S::one(), gb, (n as isize, 1));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = slot(nodes, grads, v) {
                        gv.iter_mut().zip(g).for_each(|(o, &d)| *o += d);
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, &d)| *o += d);
                }
                if let Some(gb) = slot(nodes, grads, *bias) {
                    let c = gb.len();
                    for (i, &d) in g.iter().enumerate() {
                        gb[i % c] += d;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = slot(nodes, grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, &d)| *o += d * *c);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * gelu_parts(xv[i]).1;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.value(*x).cols();
                let gam = self.value(*gamma).data();
                if let Some(gg) = slot(nodes, grads, *gamma) {
                    for (i, &d) in g.iter().enumerate() {
                        gg[i % c] += d * xhat[i];
                    }
                }
                if let Some(gb) = slot(nodes, grads, *beta) {
                    for (i, &d) in g.iter().enumerate() {
                        gb[i % c] += d;
                    }
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    let cs = S::from_usize(c).unwrap();
                    for (r, &rs) in rstd.iter().enumerate() {
                        let base = r * c;
                        let mut mean_d = S::zero();
                        let mut mean_dx = S::zero();
                        for j in 0..c {
                            let dh = g[base + j] * gam[j];
                            mean_d += dh;
                            mean_dx += dh * xhat[base + j];
                        }
                        mean_d /= cs;
                        mean_dx /= cs;
                        for j in 0..c {
                            let dh = g[base + j] * gam[j];
                            gx[base + j] += rs * (dh - mean_d - xhat[base + j] * mean_dx);
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = axis_layout(node.value.shape(), *axis)?;
                if let Some(gx) = slot(nodes, grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let dot: S = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.value(*logits).cols();
                let scale = g[0] / S::from_usize(labels.len()).unwrap();
                if let Some(gl) = slot(nodes, grads, *logits) {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { S::one() } else { S::zero() };
                            gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::SegmentMean { x, segments } => {
                let d = node.value.cols();
                if let Some(gx) = slot(nodes, grads, *x) {
                    let mut start = 0;
                    for (s, &len) in segments.iter().enumerate() {
                        let inv = S::one() / S::from_usize(len).unwrap();
                        for r in start..start + len {
                            for j in 0..d {
                                gx[r * d + j] += g[s * d + j] * inv;
                            }
                        }
                        start += len;
                    }
                }
            }
            Op::GatherRows { table, index } => {
                let d = node.value.cols();
                if let Some(gt) = slot(nodes, grads, *table) {
                    for (r, &i) in index.iter().enumerate() {
                        for j in 0..d {
                            gt[i * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, segments, *heads, probs, g, grads)?,
            Op::Sum(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[usize],
        heads: usize,
        probs: &[Vec<S>],
        g: &[S],
        grads: &mut [Option<Vec<S>>],
    ) -> Result<(), NnError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = (qv.rows(), qv.cols());
        let dh = d / heads;
        let ds = d as isize;
        let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
        let need = |x: Var| self.nodes[x.0].requires_grad;
        let mut gq = need(q).then(|| vec![S::zero(); n * d]);
        let mut gk = need(k).then(|| vec![S::zero(); n * d]);
        let mut gv = need(v).then(|| vec![S::zero(); n * d]);
        let mut start = 0;
        let mut block = 0;
        for &len in segments {
            let ls = len as isize;
            for h in 0..heads {
                let off = start * d + h * dh;
                let p = &probs[block];
                block += 1;
                if let Some(gv) = gv.as_mut() {
                    // dV = Pᵀ · dO
                    S::gemm(len, len, dh, S::one(), p, (1, ls), &g[off..], (ds, 1), S::one(), &mut gv[off..], (ds, 1));
                }
                if gq.is_none() && gk.is_none() {
                    continue;
                }
                // dP = dO · Vᵀ
                let mut ds_buf = vec![S::zero(); len * len];
                S::gemm(len, dh, len, S::one(), &g[off..], (ds, 1), &vv.data()[off..], (1, ds), S::zero(), &mut ds_buf, (ls, 1));
                for (drow, prow) in ds_buf.chunks_mut(len).zip(p.chunks(len)) {
                    let dot: S = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                    for (dv, &pv) in drow.iter_mut().zip(prow) {
                        *dv = pv * (*dv - dot) * scale;
                    }
                }
                if let Some(gq) = gq.as_mut() {
                    // dQ = dS · K
                    S::gemm(len, len, dh, S::one(), &ds_buf, (ls, 1), &kv.data()[off..], (ds, 1), S::one(), &mut gq[off..], (ds, 1));
                }
                if let Some(gk) = gk.as_mut() {
                    // dK = dSᵀ · Q
                    S::gemm(len, len, dh, S::one(), &ds_buf, (1, ls), &qv.data()[off..], (ds, 1), S::one(), &mut gk[off..], (ds, 1));
                }
            }
            start += len;
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(local) = local {
                let dst = grads[var.0].get_or_insert_with(|| vec![S::zero(); n * d]);
                dst.iter_mut().zip(local).for_each(|(o, x)| *o += x);
            }
        }
        Ok(())
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    params: HashMap<ParamId, Var>,
}

impl<S: Scalar> Gradients<S> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a parameter; `None` if it did not influence the root.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.params.get(&id).and_then(|&v| self.wrt(v))
    }
}
