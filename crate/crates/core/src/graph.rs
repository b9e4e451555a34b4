//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A `Graph` is an append-only tape: node inputs always precede the node, so
//! backward is a single reverse sweep that visits each node exactly once.
//! The op set is exactly what MLP blocks, batch norm, L2 normalization, and
//! the contrastive losses need — no broadcasting beyond scalar-with-tensor
//! and row-vector bias addition.

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: T },
    AddRowBias { a: NodeId, bias: NodeId },
    Relu { a: NodeId },
    Gelu { a: NodeId },
    L2Normalize { a: NodeId, eps: T, norms: Vec<T> },
    BatchNormTrain { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Tensor<T>, inv_std: Vec<T> },
    BatchNormEval { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Tensor<T>, inv_std: Vec<T> },
    Sum { a: NodeId },
    InfoNce { q: NodeId, k: NodeId, tau: T, softmax: Tensor<T> },
    CrossEntropy { logits: NodeId, labels: Vec<usize>, softmax: Tensor<T> },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Per-node gradient slots produced by [`Graph::backward`].
pub struct Gradients<T> {
    slots: Vec<Option<Tensor<T>>>,
}

/// Append-only computation tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<NodeId>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                dst[j] = dst[j] + av * row[j];
            }
        }
    }
    out
}

/// A^T * C for A [m,k], C [m,n] -> [k,n].
fn matmul_at_b<T: Scalar>(a: &[T], c: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let row = &c[i * n..(i + 1) * n];
            let dst = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                dst[j] = dst[j] + av * row[j];
            }
        }
    }
    out
}

/// C * B^T for C [m,n], B [k,n] -> [m,k].
fn matmul_a_bt<T: Scalar>(c: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let crow = &c[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = T::zero();
            for j in 0..n {
                s = s + crow[j] * brow[j];
            }
            out[i * k + p] = s;
        }
    }
    out
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::DimMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: Vec::new() }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value, requires_grad });
        id
    }

    fn req(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    /// Constant leaf: data, frozen parameters, detached branches.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Trainable leaf; receives a gradient slot from [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        let id = self.push(Op::Leaf, value, true);
        self.params.push(id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(TensorError::DimMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let data = matmul_raw(av.data(), bv.data(), m, k, n);
        let value = Tensor::from_vec(vec![m, n], data)?;
        let req = self.req(a) || self.req(b);
        Ok(self.push(Op::Matmul { a, b }, value, req))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        same_shape("add", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        let req = self.req(a) || self.req(b);
        Ok(self.push(Op::Add { a, b }, value, req))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        same_shape("sub", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        let req = self.req(a) || self.req(b);
        Ok(self.push(Op::Sub { a, b }, value, req))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        same_shape("mul", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        let req = self.req(a) || self.req(b);
        Ok(self.push(Op::Mul { a, b }, value, req))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let value = self.value(a).map(|x| x * c);
        let req = self.req(a);
        self.push(Op::Scale { a, c }, value, req)
    }

    /// `[B, d] + [d]` row-vector bias addition.
    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (av, bv) = (self.value(a), self.value(bias));
        if av.shape().len() != 2 || bv.shape() != [av.shape()[1]] {
            return Err(TensorError::DimMismatch {
                op: "add_row_bias",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (rows, cols) = (av.shape()[0], av.shape()[1]);
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(av.data()[i * cols + j] + bv.data()[j]);
            }
        }
        let value = Tensor::from_vec(vec![rows, cols], data)?;
        let req = self.req(a) || self.req(bias);
        Ok(self.push(Op::AddRowBias { a, bias }, value, req))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let req = self.req(a);
        self.push(Op::Relu { a }, value, req)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let s = T::of((2.0 / std::f64::consts::PI).sqrt());
        let c = T::of(0.044715);
        let half = T::of(0.5);
        let value = self.value(a).map(|x| {
            let t = (s * (x + c * x * x * x)).tanh();
            half * x * (T::one() + t)
        });
        let req = self.req(a);
        self.push(Op::Gelu { a }, value, req)
    }

    /// Row-wise L2 normalization of a `[B, d]` tensor: each row divided by
    /// `max(norm, eps)`.
    pub fn l2_normalize(&mut self, a: NodeId, eps: T) -> Result<NodeId, TensorError> {
        let av = self.value(a);
        if av.shape().len() != 2 {
            return Err(TensorError::Contract(format!(
                "l2_normalize expects a 2-D tensor, got {:?}",
                av.shape()
            )));
        }
        if eps <= T::zero() {
            return Err(TensorError::Contract("l2_normalize eps must be > 0".into()));
        }
        let (rows, cols) = (av.shape()[0], av.shape()[1]);
        let mut norms = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let row = av.row(i);
            let mut sq = T::zero();
            for &v in row {
                sq = sq + v * v;
            }
            let norm = sq.sqrt();
            norms.push(norm);
            let denom = if norm >= eps { norm } else { eps };
            for &v in row {
                data.push(v / denom);
            }
        }
        let value = Tensor::from_vec(vec![rows, cols], data)?;
        let req = self.req(a);
        Ok(self.push(Op::L2Normalize { a, eps, norms }, value, req))
    }

    /// Batch normalization over the batch dimension of `[B, d]` with batch
    /// statistics (biased variance). Returns the node plus the batch mean and
    /// variance so the caller can maintain running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
    ) -> Result<(NodeId, Tensor<T>, Tensor<T>), TensorError> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(TensorError::Contract(format!(
                "batch_norm expects a 2-D tensor, got {:?}",
                xv.shape()
            )));
        }
        let (b, d) = (xv.shape()[0], xv.shape()[1]);
        if b < 2 {
            return Err(TensorError::BatchTooSmall { op: "batch_norm_train", batch: b, min: 2 });
        }
        same_shape("batch_norm gamma", &Tensor::zeros(&[d]), self.value(gamma))?;
        same_shape("batch_norm beta", &Tensor::zeros(&[d]), self.value(beta))?;

        let inv_b = T::one() / T::of(b as f64);
        let mut mean = vec![T::zero(); d];
        for i in 0..b {
            for j in 0..d {
                mean[j] = mean[j] + xv.data()[i * d + j];
            }
        }
        for m in mean.iter_mut() {
            *m = *m * inv_b;
        }
        let mut var = vec![T::zero(); d];
        for i in 0..b {
            for j in 0..d {
                let c = xv.data()[i * d + j] - mean[j];
                var[j] = var[j] + c * c;
            }
        }
        for v in var.iter_mut() {
            *v = *v * inv_b;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

        let mut xhat_data = Vec::with_capacity(b * d);
        for i in 0..b {
            for j in 0..d {
                xhat_data.push((xv.data()[i * d + j] - mean[j]) * inv_std[j]);
            }
        }
        let xhat = Tensor::from_vec(vec![b, d], xhat_data)?;

        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut out = Vec::with_capacity(b * d);
        for i in 0..b {
            for j in 0..d {
                out.push(gv[j] * xhat.data()[i * d + j] + bv[j]);
            }
        }
        let value = Tensor::from_vec(vec![b, d], out)?;
        let req = self.req(x) || self.req(gamma) || self.req(beta);
        let mean_t = Tensor::from_vec(vec![d], mean)?;
        let var_t = Tensor::from_vec(vec![d], var)?;
        let id = self.push(Op::BatchNormTrain { x, gamma, beta, xhat, inv_std }, value, req);
        Ok((id, mean_t, var_t))
    }

    /// Batch normalization using fixed running statistics (eval mode).
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: T,
    ) -> Result<NodeId, TensorError> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(TensorError::Contract(format!(
                "batch_norm expects a 2-D tensor, got {:?}",
                xv.shape()
            )));
        }
        let (b, d) = (xv.shape()[0], xv.shape()[1]);
        same_shape("batch_norm running_mean", &Tensor::zeros(&[d]), running_mean)?;
        same_shape("batch_norm running_var", &Tensor::zeros(&[d]), running_var)?;
        let inv_std: Vec<T> =
            running_var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat_data = Vec::with_capacity(b * d);
        for i in 0..b {
            for j in 0..d {
                xhat_data.push((xv.data()[i * d + j] - running_mean.data()[j]) * inv_std[j]);
            }
        }
        let xhat = Tensor::from_vec(vec![b, d], xhat_data)?;
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut out = Vec::with_capacity(b * d);
        for i in 0..b {
            for j in 0..d {
                out.push(gv[j] * xhat.data()[i * d + j] + bv[j]);
            }
        }
        let value = Tensor::from_vec(vec![b, d], out)?;
        let req = self.req(x) || self.req(gamma) || self.req(beta);
        Ok(self.push(Op::BatchNormEval { x, gamma, beta, xhat, inv_std }, value, req))
    }

    /// Sum of all elements, as a `[1]` scalar node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let mut s = T::zero();
        for &v in self.value(a).data() {
            s = s + v;
        }
        let req = self.req(a);
        self.push(Op::Sum { a }, Tensor::scalar(s), req)
    }

    /// InfoNCE loss over row-aligned queries and keys: mean over rows i of
    /// `-log(exp(q_i.k_i/tau) / sum_j exp(q_i.k_j/tau))`, with in-batch keys
    /// as negatives. Differentiable with respect to `q` only; the key branch
    /// is treated as constant.
    pub fn infonce(&mut self, q: NodeId, k: NodeId, tau: T) -> Result<NodeId, TensorError> {
        let (qv, kv) = (self.value(q), self.value(k));
        same_shape("infonce", qv, kv)?;
        if qv.shape().len() != 2 || qv.shape()[0] == 0 {
            return Err(TensorError::Contract(format!(
                "infonce expects a non-empty [B, d] pair, got {:?}",
                qv.shape()
            )));
        }
        if tau <= T::zero() {
            return Err(TensorError::Contract("infonce temperature must be > 0".into()));
        }
        let (b, d) = (qv.shape()[0], qv.shape()[1]);
        let logits = matmul_a_bt(qv.data(), kv.data(), b, b, d);
        let inv_tau = T::one() / tau;
        let mut softmax = vec![T::zero(); b * b];
        let mut loss = T::zero();
        for i in 0..b {
            let row: Vec<T> = (0..b).map(|j| logits[i * b + j] * inv_tau).collect();
            let max = row.iter().copied().fold(row[0], |m, v| if v > m { v } else { m });
            let mut denom = T::zero();
            for j in 0..b {
                let e = (row[j] - max).exp();
                softmax[i * b + j] = e;
                denom = denom + e;
            }
            for j in 0..b {
                softmax[i * b + j] = softmax[i * b + j] / denom;
            }
            let lse = max + denom.ln();
            loss = loss + lse - row[i];
        }
        loss = loss / T::of(b as f64);
        let softmax = Tensor::from_vec(vec![b, b], softmax)?;
        let req = self.req(q);
        Ok(self.push(Op::InfoNce { q, k, tau, softmax }, Tensor::scalar(loss), req))
    }

    /// Mean softmax cross-entropy of `[B, C]` logits against integer labels.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, TensorError> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 || lv.shape()[0] != labels.len() {
            return Err(TensorError::Contract(format!(
                "cross_entropy: logits {:?} vs {} labels",
                lv.shape(),
                labels.len()
            )));
        }
        let (b, c) = (lv.shape()[0], lv.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(TensorError::Contract(format!(
                "cross_entropy: label {bad} out of range for {c} classes"
            )));
        }
        let mut softmax = vec![T::zero(); b * c];
        let mut loss = T::zero();
        for i in 0..b {
            let row = &lv.data()[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(row[0], |m, v| if v > m { v } else { m });
            let mut denom = T::zero();
            for j in 0..c {
                let e = (row[j] - max).exp();
                softmax[i * c + j] = e;
                denom = denom + e;
            }
            for j in 0..c {
                softmax[i * c + j] = softmax[i * c + j] / denom;
            }
            let lse = max + denom.ln();
            loss = loss + lse - row[labels[i]];
        }
        loss = loss / T::of(b as f64);
        let softmax = Tensor::from_vec(vec![b, c], softmax)?;
        let req = self.req(logits);
        let labels = labels.to_vec();
        Ok(self.push(Op::CrossEntropy { logits, labels, softmax }, Tensor::scalar(loss), req))
    }

    /// Reverse accumulation from a scalar loss node. Gradients of parameters
    /// that do not influence the loss are zero tensors, never absent.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, TensorError> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut slots: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(Tensor::ones(&[1]));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let g = match slots[id].clone() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g, &mut slots);
        }
        Ok(Gradients { slots })
    }

    fn accumulate(&self, slots: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut slots[id.0] {
            Some(existing) => {
                debug_assert_eq!(existing.shape(), delta.shape());
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e = *e + *d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, id: usize, g: &Tensor<T>, slots: &mut [Option<Tensor<T>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.req(*a) {
                    let da = matmul_a_bt(g.data(), bv.data(), m, k, n);
                    self.accumulate(slots, *a, Tensor::from_vec(vec![m, k], da).unwrap());
                }
                if self.req(*b) {
                    let db = matmul_at_b(av.data(), g.data(), m, k, n);
                    self.accumulate(slots, *b, Tensor::from_vec(vec![k, n], db).unwrap());
                }
            }
            Op::Add { a, b } => {
                self.accumulate(slots, *a, g.clone());
                self.accumulate(slots, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(slots, *a, g.clone());
                self.accumulate(slots, *b, g.map(|v| -v));
            }
            Op::Mul { a, b } => {
                if self.req(*a) {
                    let bv = self.value(*b);
                    let da = Tensor::from_vec(
                        g.shape().to_vec(),
                        g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect(),
                    )
                    .unwrap();
                    self.accumulate(slots, *a, da);
                }
                if self.req(*b) {
                    let av = self.value(*a);
                    let db = Tensor::from_vec(
                        g.shape().to_vec(),
                        g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect(),
                    )
                    .unwrap();
                    self.accumulate(slots, *b, db);
                }
            }
            Op::Scale { a, c } => {
                let c = *c;
                self.accumulate(slots, *a, g.map(|v| v * c));
            }
            Op::AddRowBias { a, bias } => {
                self.accumulate(slots, *a, g.clone());
                if self.req(*bias) {
                    let (rows, cols) = (g.shape()[0], g.shape()[1]);
                    let mut db = vec![T::zero(); cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            db[j] = db[j] + g.data()[i * cols + j];
                        }
                    }
                    self.accumulate(slots, *bias, Tensor::from_vec(vec![cols], db).unwrap());
                }
            }
            Op::Relu { a } => {
                let av = self.value(*a);
                let da = Tensor::from_vec(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(av.data())
                        .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                        .collect(),
                )
                .unwrap();
                self.accumulate(slots, *a, da);
            }
            Op::Gelu { a } => {
                let s = T::of((2.0 / std::f64::consts::PI).sqrt());
                let c = T::of(0.044715);
                let half = T::of(0.5);
                let three = T::of(3.0);
                let av = self.value(*a);
                let da = Tensor::from_vec(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(av.data())
                        .map(|(&gv, &x)| {
                            let inner = s * (x + c * x * x * x);
                            let t = inner.tanh();
                            let sech2 = T::one() - t * t;
                            let d = half * (T::one() + t)
                                + half * x * sech2 * s * (T::one() + three * c * x * x);
                            gv * d
                        })
                        .collect(),
                )
                .unwrap();
                self.accumulate(slots, *a, da);
            }
            Op::L2Normalize { a, eps, norms } => {
                let av = self.value(*a);
                let y = self.value(NodeId(id));
                let (rows, cols) = (av.shape()[0], av.shape()[1]);
                let mut da = Vec::with_capacity(rows * cols);
                for i in 0..rows {
                    let grow = &g.data()[i * cols..(i + 1) * cols];
                    if norms[i] >= *eps {
                        let yrow = y.row(i);
                        let mut dot = T::zero();
                        for j in 0..cols {
                            dot = dot + yrow[j] * grow[j];
                        }
                        for j in 0..cols {
                            da.push((grow[j] - yrow[j] * dot) / norms[i]);
                        }
                    } else {
                        for j in 0..cols {
                            da.push(grow[j] / *eps);
                        }
                    }
                }
                self.accumulate(slots, *a, Tensor::from_vec(vec![rows, cols], da).unwrap());
            }
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
                let (b, d) = (xhat.shape()[0], xhat.shape()[1]);
                let gv = self.value(*gamma);
                if self.req(*beta) {
                    let mut db = vec![T::zero(); d];
                    for i in 0..b {
                        for j in 0..d {
                            db[j] = db[j] + g.data()[i * d + j];
                        }
                    }
                    self.accumulate(slots, *beta, Tensor::from_vec(vec![d], db).unwrap());
                }
                if self.req(*gamma) {
                    let mut dg = vec![T::zero(); d];
                    for i in 0..b {
                        for j in 0..d {
                            dg[j] = dg[j] + g.data()[i * d + j] * xhat.data()[i * d + j];
                        }
                    }
                    self.accumulate(slots, *gamma, Tensor::from_vec(vec![d], dg).unwrap());
                }
                if self.req(*x) {
                    // dxhat = g * gamma; dx folds in the batch-statistic terms.
                    let inv_b = T::one() / T::of(b as f64);
                    let mut mean_dxhat = vec![T::zero(); d];
                    let mut mean_dxhat_xhat = vec![T::zero(); d];
                    for i in 0..b {
                        for j in 0..d {
                            let dxh = g.data()[i * d + j] * gv.data()[j];
                            mean_dxhat[j] = mean_dxhat[j] + dxh;
                            mean_dxhat_xhat[j] =
                                mean_dxhat_xhat[j] + dxh * xhat.data()[i * d + j];
                        }
                    }
                    for j in 0..d {
                        mean_dxhat[j] = mean_dxhat[j] * inv_b;
                        mean_dxhat_xhat[j] = mean_dxhat_xhat[j] * inv_b;
                    }
                    let mut dx = Vec::with_capacity(b * d);
                    for i in 0..b {
                        for j in 0..d {
                            let dxh = g.data()[i * d + j] * gv.data()[j];
                            dx.push(
                                inv_std[j]
                                    * (dxh
                                        - mean_dxhat[j]
                                        - xhat.data()[i * d + j] * mean_dxhat_xhat[j]),
                            );
                        }
                    }
                    self.accumulate(slots, *x, Tensor::from_vec(vec![b, d], dx).unwrap());
                }
            }
            Op::BatchNormEval { x, gamma, beta, xhat, inv_std } => {
                let (b, d) = (xhat.shape()[0], xhat.shape()[1]);
                let gv = self.value(*gamma);
                if self.req(*beta) {
                    let mut db = vec![T::zero(); d];
                    for i in 0..b {
                        for j in 0..d {
                            db[j] = db[j] + g.data()[i * d + j];
                        }
                    }
                    self.accumulate(slots, *beta, Tensor::from_vec(vec![d], db).unwrap());
                }
                if self.req(*gamma) {
                    let mut dg = vec![T::zero(); d];
                    for i in 0..b {
                        for j in 0..d {
                            dg[j] = dg[j] + g.data()[i * d + j] * xhat.data()[i * d + j];
                        }
                    }
                    self.accumulate(slots, *gamma, Tensor::from_vec(vec![d], dg).unwrap());
                }
                if self.req(*x) {
                    let mut dx = Vec::with_capacity(b * d);
                    for i in 0..b {
                        for j in 0..d {
                            dx.push(g.data()[i * d + j] * gv.data()[j] * inv_std[j]);
                        }
                    }
                    self.accumulate(slots, *x, Tensor::from_vec(vec![b, d], dx).unwrap());
                }
            }
            Op::Sum { a } => {
                let av = self.value(*a);
                let gs = g.scalar_value();
                self.accumulate(slots, *a, Tensor::filled(av.shape(), gs));
            }
            Op::InfoNce { q, k, tau, softmax } => {
                // dq_i = g/(B*tau) * (sum_j p_ij k_j - k_i); no gradient to k.
                if self.req(*q) {
                    let kv = self.value(*k);
                    let (b, d) = (kv.shape()[0], kv.shape()[1]);
                    let coef = g.scalar_value() / (T::of(b as f64) * *tau);
                    let pk = matmul_raw(softmax.data(), kv.data(), b, b, d);
                    let mut dq = Vec::with_capacity(b * d);
                    for i in 0..b {
                        for j in 0..d {
                            dq.push(coef * (pk[i * d + j] - kv.data()[i * d + j]));
                        }
                    }
                    self.accumulate(slots, *q, Tensor::from_vec(vec![b, d], dq).unwrap());
                }
            }
            Op::CrossEntropy { logits, labels, softmax } => {
                if self.req(*logits) {
                    let (b, c) = (softmax.shape()[0], softmax.shape()[1]);
                    let coef = g.scalar_value() / T::of(b as f64);
                    let mut dl = Vec::with_capacity(b * c);
                    for i in 0..b {
                        for j in 0..c {
                            let onehot = if labels[i] == j { T::one() } else { T::zero() };
                            dl.push(coef * (softmax.data()[i * c + j] - onehot));
                        }
                    }
                    self.accumulate(slots, *logits, Tensor::from_vec(vec![b, c], dl).unwrap());
                }
            }
        }
    }

    /// Gradient of a node after [`Graph::backward`]; zeros when the node did
    /// not influence the loss.
    pub fn grad_of(&self, grads: &Gradients<T>, id: NodeId) -> Tensor<T> {
        grads.slots[id.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.value(id).shape()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::new();
        let i2 = g.input(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let a = g.input(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let c = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_orthogonal_rows() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::from_rows(&[vec![1.0, 0.0]]));
        let b = g.input(Tensor::from_rows(&[vec![0.0], vec![5.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_vec(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn add_zero_is_bitwise_identity() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::from_vec(vec![3], vec![1.5, -2.25, 3.125]).unwrap());
        let z = g.input(Tensor::zeros(&[3]));
        let y = g.add(x, z).unwrap();
        assert!(g.value(y).bit_eq(g.value(x)));
    }

    #[test]
    fn l2_normalize_345_triangle() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_rows(&[vec![3.0, 4.0]]));
        let y = g.l2_normalize(x, 1e-12).unwrap();
        let out = g.value(y).data();
        assert!((out[0] - 0.6).abs() < 1e-15);
        assert!((out[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_zero_row_preserved() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_rows(&[vec![0.0, 0.0]]));
        let y = g.l2_normalize(x, 1e-12).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn batch_norm_constant_column_is_zeroed() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_rows(&[vec![2.0, 1.0], vec![2.0, 3.0], vec![2.0, 8.0]]));
        let gamma = g.input(Tensor::ones(&[2]));
        let beta = g.input(Tensor::zeros(&[2]));
        let (y, mean, var) = g.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
        let out = g.value(y);
        for i in 0..3 {
            assert_eq!(out.row(i)[0], 0.0);
        }
        assert_eq!(mean.data()[0], 2.0);
        assert_eq!(var.data()[0], 0.0);
    }

    #[test]
    fn batch_norm_gamma_zero_gives_beta() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_rows(&[vec![1.0, 2.0], vec![5.0, -1.0]]));
        let gamma = g.input(Tensor::zeros(&[2]));
        let beta = g.input(Tensor::from_vec(vec![2], vec![0.5, -0.25]).unwrap());
        let (y, _, _) = g.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
        let out = g.value(y);
        for i in 0..2 {
            assert_eq!(out.row(i), &[0.5, -0.25]);
        }
    }

    #[test]
    fn batch_norm_rejects_single_row() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[1, 4]));
        let gamma = g.input(Tensor::ones(&[4]));
        let beta = g.input(Tensor::zeros(&[4]));
        let err = g.batch_norm_train(x, gamma, beta, 1e-5).unwrap_err();
        assert!(matches!(err, TensorError::BatchTooSmall { .. }));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(g.grad_of(&grads, x).data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_half_square_norm_is_x() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let loss = g.scale(s, 0.5);
        let grads = g.backward(loss).unwrap();
        assert_eq!(g.grad_of(&grads, x).data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::Contract(_)));
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let unused = g.param(Tensor::from_vec(vec![3], vec![5.0, 6.0, 7.0]).unwrap());
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        let gu = g.grad_of(&grads, unused);
        assert_eq!(gu.shape(), &[3]);
        assert!(gu.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn infonce_single_row_is_zero() {
        let mut g = Graph::<f64>::new();
        let q = g.input(Tensor::from_rows(&[vec![1.0, 0.0]]));
        let k = g.input(Tensor::from_rows(&[vec![1.0, 0.0]]));
        let l = g.infonce(q, k, 0.2).unwrap();
        assert_eq!(g.value(l).scalar_value(), 0.0);
    }

    #[test]
    fn infonce_uniform_similarities_is_ln_b() {
        let mut g = Graph::<f64>::new();
        // All q.k products equal -> softmax uniform -> loss = ln(B).
        let q = g.input(Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]]));
        let k = g.input(Tensor::from_rows(&[vec![0.3, 0.1], vec![0.3, 0.5], vec![0.3, 0.9]]));
        // q rows have zero second component, so q.k_j = 0.3 for all j.
        let l = g.infonce(q, k, 0.2).unwrap();
        assert!((g.value(l).scalar_value() - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn infonce_has_no_gradient_to_keys() {
        let mut g = Graph::<f64>::new();
        let q = g.param(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let k = g.param(Tensor::from_rows(&[vec![0.8, 0.6], vec![0.6, -0.8]]));
        let l = g.infonce(q, k, 0.2).unwrap();
        let grads = g.backward(l).unwrap();
        let gk = g.grad_of(&grads, k);
        assert!(gk.data().iter().all(|&v| v == 0.0));
        let gq = g.grad_of(&grads, q);
        assert!(gq.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn infonce_temperature_scale_identity() {
        // Scaling tau by c and all similarities by c leaves the loss unchanged.
        let q_rows = vec![vec![0.2, -0.4, 0.1], vec![-0.3, 0.5, 0.7]];
        let k_rows = vec![vec![0.9, 0.0, -0.2], vec![0.1, 0.8, 0.3]];
        let c = 3.7;
        let mut g = Graph::<f64>::new();
        let q = g.input(Tensor::from_rows(&q_rows));
        let k = g.input(Tensor::from_rows(&k_rows));
        let l1 = g.infonce(q, k, 0.2).unwrap();
        let qc = Tensor::from_rows(
            &q_rows.iter().map(|r| r.iter().map(|v| v * c).collect()).collect::<Vec<_>>(),
        );
        let q2 = g.input(qc);
        let l2 = g.infonce(q2, k, 0.2 * c).unwrap();
        assert!((g.value(l1).scalar_value() - g.value(l2).scalar_value()).abs() < 1e-12);
    }
}
