//! Minimal tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! Operations are evaluated eagerly when they are recorded on a [`Graph`], so
//! every node's value is available as soon as the call returns. [`Graph::backward`]
//! walks the tape in strict reverse insertion order, which makes gradients
//! bit-reproducible for identical inputs.
//!
//! The primitive set is deliberately small: matmul, add, mul, relu,
//! log-softmax, negative-log-likelihood gather, row-wise KL divergence,
//! sum/mean reductions and elementwise clamp.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("backward called on node {0} that was never evaluated on this graph")]
    NotEvaluated(usize),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major tensor with an optional gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::BadLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = 1.0);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    /// 1-D tensor.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        debug_assert!(grad.as_ref().is_none_or(|g| g.len() == self.data.len()));
        self.grad = grad;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && (self.shape.is_empty() || self.shape == [1])
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// True when every value (and gradient, if present) is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
            && self
                .grad
                .as_ref()
                .is_none_or(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.data)
    }
}

pub fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add { lhs: Var, rhs: Var, broadcast: bool },
    Mul { lhs: Var, rhs: Var, broadcast: bool },
    Relu(Var),
    LogSoftmax(Var),
    NllGather(Var, Vec<usize>),
    KlDiv(Var, Var),
    Sum(Var),
    Mean(Var),
    Clamp { input: Var, lo: f64, hi: f64 },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape of evaluated operations.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad;
        self.push(tensor, Op::Leaf, requires_grad)
    }

    /// Records an input tensor that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.grad = None;
        debug_assert!(value.is_finite(), "non-finite value produced by {op:?}");
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

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape.len() != 2 || bv.shape.len() != 2 || av.shape[1] != bv.shape[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &aip) in arow.iter().enumerate() {
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv.data[p * n..(p + 1) * n];
                for (o, &bpj) in orow.iter_mut().zip(brow) {
                    *o += aip * bpj;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Checks elementwise compatibility; returns whether `rhs` broadcasts along
    /// the leading batch dimension of `lhs`.
    fn elementwise_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let (sa, sb) = (&self.value(a).shape, &self.value(b).shape);
        if sa == sb {
            Ok(false)
        } else if sa.len() == sb.len() + 1 && sa[1..] == sb[..] {
            Ok(true)
        } else {
            Err(AutodiffError::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            })
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.elementwise_shapes("add", a, b)?;
        let out = self.zip_broadcast(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            out,
            Op::Add {
                lhs: a,
                rhs: b,
                broadcast,
            },
            rg,
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.elementwise_shapes("mul", a, b)?;
        let out = self.zip_broadcast(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            out,
            Op::Mul {
                lhs: a,
                rhs: b,
                broadcast,
            },
            rg,
        ))
    }

    fn zip_broadcast(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let period = bv.data.len().max(1);
        let data = av
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data[i % period]))
            .collect();
        Tensor {
            shape: av.shape.clone(),
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let data = av.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let out = Tensor::new(av.shape.clone(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Relu(a), rg))
    }

    /// Row-wise log-softmax over the last dimension of a 2-D tensor.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.shape.len() != 2 || av.shape[1] == 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "log_softmax",
                lhs: av.shape.clone(),
                rhs: vec![],
            });
        }
        let c = av.shape[1];
        let mut data = Vec::with_capacity(av.data.len());
        for row in av.data.chunks(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|&x| x - lse));
        }
        let out = Tensor::new(av.shape.clone(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::LogSoftmax(a), rg))
    }

    /// Per-row negative log-likelihood `-logp[i, labels[i]]`, shape `(batch,)`.
    pub fn nll(&mut self, logp: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logp);
        if lv.shape.len() != 2 || lv.shape[0] != labels.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "nll",
                lhs: lv.shape.clone(),
                rhs: vec![labels.len()],
            });
        }
        let c = lv.shape[1];
        let mut data = Vec::with_capacity(labels.len());
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(AutodiffError::LabelOutOfRange {
                    label: y,
                    classes: c,
                });
            }
            data.push(-lv.data[i * c + y]);
        }
        let out = Tensor::vector(data);
        let rg = self.rg(&[logp]);
        Ok(self.push(out, Op::NllGather(logp, labels.to_vec()), rg))
    }

    /// Per-row `KL(p || q) = sum_j exp(p_j) (p_j - q_j)` for log-probability rows.
    pub fn kl_div(&mut self, logp: Var, logq: Var) -> Result<Var> {
        let (pv, qv) = (self.value(logp), self.value(logq));
        if pv.shape.len() != 2 || pv.shape != qv.shape {
            return Err(AutodiffError::ShapeMismatch {
                op: "kl_div",
                lhs: pv.shape.clone(),
                rhs: qv.shape.clone(),
            });
        }
        let c = pv.shape[1];
        let data = pv
            .data
            .chunks(c)
            .zip(qv.data.chunks(c))
            .map(|(p, q)| p.iter().zip(q).map(|(&pj, &qj)| pj.exp() * (pj - qj)).sum())
            .collect();
        let out = Tensor::vector(data);
        let rg = self.rg(&[logp, logq]);
        Ok(self.push(out, Op::KlDiv(logp, logq), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.data.is_empty() {
            return Err(AutodiffError::ShapeMismatch {
                op: "mean",
                lhs: av.shape.clone(),
                rhs: vec![],
            });
        }
        let s = av.data.iter().sum::<f64>() / av.data.len() as f64;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), rg))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let av = self.value(a);
        let data = av.data.iter().map(|&x| x.clamp(lo, hi)).collect();
        let out = Tensor::new(av.shape.clone(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Clamp { input: a, lo, hi }, rg))
    }

    /// Reverse sweep from a scalar root.
    ///
    /// Gradients are also written into the `grad` slot of every tracked leaf.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        let Some(root_node) = self.nodes.get(root.0) else {
            return Err(AutodiffError::NotEvaluated(root.0));
        };
        if !root_node.value.is_scalar() {
            return Err(AutodiffError::NonScalarRoot(root_node.value.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if root_node.requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
                    if self.nodes[a.0].requires_grad {
                        // dA = G B^T
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bv.data[p * n..(p + 1) * n];
                                da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            }
                        }
                        accumulate(&mut grads, *a, da);
                    }
                    if self.nodes[b.0].requires_grad {
                        // dB = A^T G
                        let mut db = vec![0.0; k * n];
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = av.data[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for (d, &gij) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *d += aip * gij;
                                }
                            }
                        }
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add {
                    lhs,
                    rhs,
                    broadcast,
                } => {
                    if self.nodes[rhs.0].requires_grad {
                        let db = reduce_broadcast(&g, self.nodes[rhs.0].value.numel(), *broadcast);
                        accumulate(&mut grads, *rhs, db);
                    }
                    if self.nodes[lhs.0].requires_grad {
                        accumulate(&mut grads, *lhs, g);
                    }
                }
                Op::Mul {
                    lhs,
                    rhs,
                    broadcast,
                } => {
                    let (av, bv) = (&self.nodes[lhs.0].value, &self.nodes[rhs.0].value);
                    let period = bv.numel().max(1);
                    if self.nodes[rhs.0].requires_grad {
                        let prod: Vec<f64> =
                            g.iter().zip(&av.data).map(|(gi, ai)| gi * ai).collect();
                        accumulate(&mut grads, *rhs, reduce_broadcast(&prod, period, *broadcast));
                    }
                    if self.nodes[lhs.0].requires_grad {
                        let da = g
                            .iter()
                            .enumerate()
                            .map(|(i, gi)| gi * bv.data[i % period])
                            .collect();
                        accumulate(&mut grads, *lhs, da);
                    }
                }
                Op::Relu(a) => {
                    let av = &self.nodes[a.0].value;
                    let da = g
                        .iter()
                        .zip(&av.data)
                        .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::LogSoftmax(a) => {
                    let out = &node.value;
                    let c = out.shape[1];
                    let mut da = Vec::with_capacity(g.len());
                    for (grow, orow) in g.chunks(c).zip(out.data.chunks(c)) {
                        let gsum: f64 = grow.iter().sum();
                        da.extend(grow.iter().zip(orow).map(|(gj, oj)| gj - oj.exp() * gsum));
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::NllGather(a, labels) => {
                    let c = self.nodes[a.0].value.shape[1];
                    let mut da = vec![0.0; labels.len() * c];
                    for (i, &y) in labels.iter().enumerate() {
                        da[i * c + y] = -g[i];
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::KlDiv(p, q) => {
                    let (pv, qv) = (&self.nodes[p.0].value, &self.nodes[q.0].value);
                    let c = pv.shape[1];
                    if self.nodes[p.0].requires_grad {
                        let mut dp = Vec::with_capacity(pv.numel());
                        for (i, (prow, qrow)) in pv.data.chunks(c).zip(qv.data.chunks(c)).enumerate() {
                            dp.extend(
                                prow.iter()
                                    .zip(qrow)
                                    .map(|(&pj, &qj)| g[i] * pj.exp() * (pj - qj + 1.0)),
                            );
                        }
                        accumulate(&mut grads, *p, dp);
                    }
                    if self.nodes[q.0].requires_grad {
                        let mut dq = Vec::with_capacity(qv.numel());
                        for (i, prow) in pv.data.chunks(c).enumerate() {
                            dq.extend(prow.iter().map(|&pj| -g[i] * pj.exp()));
                        }
                        accumulate(&mut grads, *q, dq);
                    }
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.numel();
                    accumulate(&mut grads, *a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].value.numel();
                    accumulate(&mut grads, *a, vec![g[0] / n as f64; n]);
                }
                Op::Clamp { input, lo, hi } => {
                    let av = &self.nodes[input.0].value;
                    let da = g
                        .iter()
                        .zip(&av.data)
                        .map(|(gi, &x)| if x >= *lo && x <= *hi { *gi } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *input, da);
                }
            }
        }

        for (idx, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = grads
                    .get(idx)
                    .cloned()
                    .flatten()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                node.value.grad = Some(g);
            }
        }

        let sizes = self.nodes.iter().map(|n| n.value.numel()).collect();
        Ok(Gradients { grads, sizes })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, delta: Vec<f64>) {
    match &mut grads[var.0] {
        Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
        slot @ None => *slot = Some(delta),
    }
}

fn reduce_broadcast(g: &[f64], len: usize, broadcast: bool) -> Vec<f64> {
    if !broadcast {
        return g.to_vec();
    }
    let mut out = vec![0.0; len];
    for chunk in g.chunks(len) {
        out.iter_mut().zip(chunk).for_each(|(o, c)| *o += c);
    }
    out
}

/// Gradients produced by one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
}

impl Gradients {
    /// Gradient of a tracked node, or `None` if the node was not reached.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, zeros if it was not reached by the sweep.
    pub fn wrt(&self, var: Var) -> Vec<f64> {
        self.get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.sizes[var.0]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, shape: &[usize], data: &[f64]) -> Var {
        g.leaf(Tensor::new(shape.to_vec(), data.to_vec()).unwrap().with_requires_grad(true))
    }

    #[test]
    fn dense_layer_shape() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let w = g.constant(Tensor::zeros(&[3, 4]));
        let y = g.matmul(x, w).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 4]);
    }

    #[test]
    fn matmul_mismatch_names_op() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let w = g.constant(Tensor::zeros(&[2, 4]));
        let err = g.matmul(x, w).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 4]
            }
        );
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let y = g.log_softmax(x).unwrap();
        let p: Vec<f64> = g.value(y).data().iter().map(|v| v.exp()).collect();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1], &[3.0]);
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x), vec![6.0]);
        assert_eq!(g.value(x).grad(), Some(&[6.0][..]));
    }

    #[test]
    fn relu_subgradient_at_zero() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1], &[0.0]);
        let y = g.relu(x).unwrap();
        let s = g.sum(y).unwrap();
        assert_eq!(g.backward(s).unwrap().wrt(x), vec![0.0]);
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2], &[1.0, 2.0]);
        let unused = leaf(&mut g, &[3], &[1.0, 1.0, 1.0]);
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(unused), vec![0.0; 3]);
        assert!(grads.get(unused).is_none());
        assert_eq!(g.value(unused).grad(), Some(&[0.0, 0.0, 0.0][..]));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2], &[1.0, 2.0]);
        assert_eq!(
            g.backward(x).unwrap_err(),
            AutodiffError::NonScalarRoot(vec![2])
        );
    }

    #[test]
    fn backward_on_foreign_node_rejected() {
        let mut other = Graph::new();
        let a = other.constant(Tensor::scalar(1.0));
        let b = other.constant(Tensor::scalar(1.0));
        let c = other.add(a, b).unwrap();
        let mut g = Graph::new();
        assert_eq!(g.backward(c).unwrap_err(), AutodiffError::NotEvaluated(2));
    }

    #[test]
    fn reused_tensor_accumulates_both_paths() {
        // f(x) = sum(x * c) + sum(x) -> df/dx = c + 1
        let mut g = Graph::new();
        let x = leaf(&mut g, &[3], &[0.5, -1.0, 2.0]);
        let c = g.constant(Tensor::vector(vec![2.0, 3.0, 4.0]));
        let xc = g.mul(x, c).unwrap();
        let s1 = g.sum(xc).unwrap();
        let s2 = g.sum(x).unwrap();
        let pair = g.add(s1, s2).unwrap();
        assert_eq!(g.backward(pair).unwrap().wrt(x), vec![3.0, 4.0, 5.0]);
    }

    #[test]
    fn bias_broadcast_gradient_sums_over_batch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(3, 2, vec![1.0; 6]).unwrap());
        let b = leaf(&mut g, &[2], &[0.1, 0.2]);
        let y = g.add(x, b).unwrap();
        let s = g.sum(y).unwrap();
        assert_eq!(g.backward(s).unwrap().wrt(b), vec![3.0, 3.0]);
    }

    #[test]
    fn broadcast_only_along_leading_dim() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 2]));
        let b = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(
            g.add(x, b),
            Err(AutodiffError::ShapeMismatch { op: "add", .. })
        ));
    }

    #[test]
    fn kl_of_identical_rows_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 3, vec![0.1, 0.5, -0.3, 2.0, 0.0, 1.0]).unwrap());
        let lp = g.log_softmax(x).unwrap();
        let kl = g.kl_div(lp, lp).unwrap();
        assert!(g.value(kl).data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn nll_label_range_checked() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2]));
        assert_eq!(
            g.nll(x, &[2]).unwrap_err(),
            AutodiffError::LabelOutOfRange {
                label: 2,
                classes: 2
            }
        );
    }

    #[test]
    fn tensor_length_validated() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
