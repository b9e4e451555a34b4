//! Encoder, projection/prediction heads, and their parameter bookkeeping.
//!
//! The encoder is an ordered stack of residual MLP blocks: pre-norm batch
//! norm, Linear(in -> hidden), GELU, Linear(hidden -> out), plus a residual
//! connection when in == out. The staged-depth mechanism is agnostic to what
//! a block computes, so this stands in for equal-size transformer blocks.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, NodeId};
use crate::rng::{mix2, rng_from};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

/// Batch-norm epsilon used everywhere.
pub const BN_EPS: f64 = 1e-5;
/// Momentum for running-statistic updates: `running = 0.9*running + 0.1*batch`.
pub const BN_STAT_MOMENTUM: f64 = 0.9;
/// Epsilon guard for L2 normalization of embeddings.
pub const L2_EPS: f64 = 1e-12;

const TAG_BLOCK: u64 = 0x424c_4f43;
const TAG_HEAD: u64 = 0x4845_4144;

/// Architecture description. Blocks 2..S share in/out dims, so their
/// parameter counts are equal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub num_layers: usize,
    pub block_hidden_dim: usize,
    pub block_out_dim: usize,
    pub proj_hidden: usize,
    pub proj_out: usize,
    pub pred_hidden: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            input_dim: 256,
            num_layers: 3,
            block_hidden_dim: 128,
            block_out_dim: 64,
            proj_hidden: 128,
            proj_out: 32,
            pred_hidden: 128,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), String> {
        let dims = [
            self.input_dim,
            self.num_layers,
            self.block_hidden_dim,
            self.block_out_dim,
            self.proj_hidden,
            self.proj_out,
            self.pred_hidden,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err("all model dimensions must be >= 1".into());
        }
        Ok(())
    }

    /// Input dimension of block `i` (0-based).
    pub fn block_in(&self, i: usize) -> usize {
        if i == 0 {
            self.input_dim
        } else {
            self.block_out_dim
        }
    }

    /// Layer dims of the projection head: (in, out, relu).
    pub fn proj_layers(&self) -> Vec<(usize, usize, bool)> {
        vec![
            (self.block_out_dim, self.proj_hidden, true),
            (self.proj_hidden, self.proj_hidden, true),
            (self.proj_hidden, self.proj_out, false),
        ]
    }

    /// Layer dims of the prediction head: (in, out, relu).
    pub fn pred_layers(&self) -> Vec<(usize, usize, bool)> {
        vec![(self.proj_out, self.pred_hidden, true), (self.pred_hidden, self.proj_out, false)]
    }

    /// Trainable parameter elements of block `i`.
    pub fn block_param_elems(&self, i: usize) -> usize {
        let inp = self.block_in(i);
        let h = self.block_hidden_dim;
        let out = self.block_out_dim;
        2 * inp + (inp * h + h) + (h * out + out)
    }

    /// Running-statistic buffer elements of block `i`.
    pub fn block_buffer_elems(&self, i: usize) -> usize {
        2 * self.block_in(i)
    }

    fn head_param_elems(layers: &[(usize, usize, bool)]) -> usize {
        layers.iter().map(|&(i, o, _)| i * o + o + 2 * o).sum()
    }

    fn head_buffer_elems(layers: &[(usize, usize, bool)]) -> usize {
        layers.iter().map(|&(_, o, _)| 2 * o).sum()
    }

    pub fn proj_param_elems(&self) -> usize {
        Self::head_param_elems(&self.proj_layers())
    }

    pub fn proj_buffer_elems(&self) -> usize {
        Self::head_buffer_elems(&self.proj_layers())
    }

    pub fn pred_param_elems(&self) -> usize {
        Self::head_param_elems(&self.pred_layers())
    }

    pub fn pred_buffer_elems(&self) -> usize {
        Self::head_buffer_elems(&self.pred_layers())
    }

    /// All serialized elements (params + buffers) of one exchange group.
    pub fn group_elems(&self, group: GroupId) -> usize {
        match group {
            GroupId::Enc(i) => self.block_param_elems(i) + self.block_buffer_elems(i),
            GroupId::Proj => self.proj_param_elems() + self.proj_buffer_elems(),
            GroupId::Pred => self.pred_param_elems() + self.pred_buffer_elems(),
        }
    }

    /// Tensor names and shapes of a group, in canonical serialization order.
    pub fn group_inventory(&self, group: GroupId) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let norm_entries = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str, d: usize| {
            out.push((format!("{prefix}.gamma"), vec![d]));
            out.push((format!("{prefix}.beta"), vec![d]));
            out.push((format!("{prefix}.running_mean"), vec![d]));
            out.push((format!("{prefix}.running_var"), vec![d]));
        };
        match group {
            GroupId::Enc(i) => {
                let inp = self.block_in(i);
                let h = self.block_hidden_dim;
                let o = self.block_out_dim;
                norm_entries(&mut out, &format!("enc.{i}.norm"), inp);
                out.push((format!("enc.{i}.lin1.weight"), vec![inp, h]));
                out.push((format!("enc.{i}.lin1.bias"), vec![h]));
                out.push((format!("enc.{i}.lin2.weight"), vec![h, o]));
                out.push((format!("enc.{i}.lin2.bias"), vec![o]));
            }
            GroupId::Proj => {
                for (j, (i_dim, o_dim, _)) in self.proj_layers().into_iter().enumerate() {
                    out.push((format!("proj.{j}.lin.weight"), vec![i_dim, o_dim]));
                    out.push((format!("proj.{j}.lin.bias"), vec![o_dim]));
                    norm_entries(&mut out, &format!("proj.{j}.norm"), o_dim);
                }
            }
            GroupId::Pred => {
                for (j, (i_dim, o_dim, _)) in self.pred_layers().into_iter().enumerate() {
                    out.push((format!("pred.{j}.lin.weight"), vec![i_dim, o_dim]));
                    out.push((format!("pred.{j}.lin.bias"), vec![o_dim]));
                    norm_entries(&mut out, &format!("pred.{j}.norm"), o_dim);
                }
            }
        }
        out
    }

    /// Inventory of several groups, concatenated in the order given.
    pub fn inventory(&self, groups: &[GroupId]) -> Vec<(String, Vec<usize>)> {
        groups.iter().flat_map(|&g| self.group_inventory(g)).collect()
    }

    /// Canonical full-model group order: encoder blocks, then heads.
    pub fn all_groups(&self) -> Vec<GroupId> {
        (0..self.num_layers)
            .map(GroupId::Enc)
            .chain([GroupId::Proj, GroupId::Pred])
            .collect()
    }
}

/// Identifies one unit of exchange and aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GroupId {
    Enc(usize),
    Proj,
    Pred,
}

/// Whether a tensor is optimized or a running-statistic buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Param,
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Scalar> BatchNormParams<T> {
    fn fresh(d: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::ones(&[d]),
            beta: Tensor::zeros(&[d]),
            running_mean: Tensor::zeros(&[d]),
            running_var: Tensor::ones(&[d]),
        }
    }

    /// Fold one batch's statistics into the running buffers.
    pub fn update_running(&mut self, mean: &Tensor<T>, var: &Tensor<T>) {
        let m = T::of(BN_STAT_MOMENTUM);
        let one_m = T::one() - m;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(mean.data()) {
            *r = m * *r + one_m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(var.data()) {
            *r = m * *r + one_m * b;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub norm: BatchNormParams<T>,
    pub lin1: LinearParams<T>,
    pub lin2: LinearParams<T>,
    pub residual: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpLayer<T> {
    pub lin: LinearParams<T>,
    pub norm: BatchNormParams<T>,
    pub relu: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head<T> {
    pub layers: Vec<MlpLayer<T>>,
}

/// Full online-branch state: S encoder blocks plus both MLP heads.
///
/// All S blocks are materialized at build time; `active_depth` gates which
/// prefix participates in forwards, exchange, and training. `frozen_prefix`
/// blocks contribute no gradients during training.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub spec: ModelSpec,
    pub blocks: Vec<Block<T>>,
    pub proj: Head<T>,
    pub pred: Head<T>,
    pub active_depth: usize,
    pub frozen_prefix: usize,
}

/// Momentum target branch: encoder copy plus projection-head copy. The
/// prediction head has no momentum counterpart.
#[derive(Debug, Clone)]
pub struct MomentumBranch<T> {
    pub blocks: Vec<Block<T>>,
    pub proj: Head<T>,
}

impl<T: Scalar> MomentumBranch<T> {
    pub fn from_model(m: &ModelState<T>) -> Self {
        MomentumBranch { blocks: m.blocks.clone(), proj: m.proj.clone() }
    }
}

fn xavier_uniform<T: Scalar>(rng: &mut rand_chacha::ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| T::of(rng.gen_range(-a..a))).collect();
    Tensor::from_vec(vec![fan_in, fan_out], data).expect("shape matches draw count")
}

fn init_block<T: Scalar>(spec: &ModelSpec, seed: u64, i: usize) -> Block<T> {
    let mut rng = rng_from(mix2(seed, TAG_BLOCK, i as u64));
    let inp = spec.block_in(i);
    let h = spec.block_hidden_dim;
    let out = spec.block_out_dim;
    Block {
        norm: BatchNormParams::fresh(inp),
        lin1: LinearParams { weight: xavier_uniform(&mut rng, inp, h), bias: Tensor::zeros(&[h]) },
        lin2: LinearParams { weight: xavier_uniform(&mut rng, h, out), bias: Tensor::zeros(&[out]) },
        residual: inp == out,
    }
}

fn init_head<T: Scalar>(layers: &[(usize, usize, bool)], seed: u64, tag: u64) -> Head<T> {
    let mut rng = rng_from(mix2(seed, TAG_HEAD, tag));
    Head {
        layers: layers
            .iter()
            .map(|&(i, o, relu)| MlpLayer {
                lin: LinearParams {
                    weight: xavier_uniform(&mut rng, i, o),
                    bias: Tensor::zeros(&[o]),
                },
                norm: BatchNormParams::fresh(o),
                relu,
            })
            .collect(),
    }
}

/// Build a model with seeded Xavier-uniform weights. Deterministic in
/// `(spec, seed)`; layer `i` depends only on `(spec, seed, i)` so staged
/// growth reproduces the same tensors as an up-front build.
pub fn build_model<T: Scalar>(spec: &ModelSpec, seed: u64) -> ModelState<T> {
    ModelState {
        spec: *spec,
        blocks: (0..spec.num_layers).map(|i| init_block(spec, seed, i)).collect(),
        proj: init_head(&spec.proj_layers(), seed, 0),
        pred: init_head(&spec.pred_layers(), seed, 1),
        active_depth: spec.num_layers,
        frozen_prefix: 0,
    }
}

fn visit_norm<'a, T: Scalar>(
    prefix: &str,
    n: &'a BatchNormParams<T>,
    f: &mut impl FnMut(String, &'a Tensor<T>, TensorRole),
) {
    f(format!("{prefix}.gamma"), &n.gamma, TensorRole::Param);
    f(format!("{prefix}.beta"), &n.beta, TensorRole::Param);
    f(format!("{prefix}.running_mean"), &n.running_mean, TensorRole::Buffer);
    f(format!("{prefix}.running_var"), &n.running_var, TensorRole::Buffer);
}

fn visit_norm_mut<T: Scalar>(
    prefix: &str,
    n: &mut BatchNormParams<T>,
    f: &mut impl FnMut(String, &mut Tensor<T>, TensorRole),
) {
    f(format!("{prefix}.gamma"), &mut n.gamma, TensorRole::Param);
    f(format!("{prefix}.beta"), &mut n.beta, TensorRole::Param);
    f(format!("{prefix}.running_mean"), &mut n.running_mean, TensorRole::Buffer);
    f(format!("{prefix}.running_var"), &mut n.running_var, TensorRole::Buffer);
}

impl<T: Scalar> ModelState<T> {
    /// Visit every tensor of one group in canonical order.
    pub fn visit_group<'a>(
        &'a self,
        group: GroupId,
        f: &mut impl FnMut(String, &'a Tensor<T>, TensorRole),
    ) {
        match group {
            GroupId::Enc(i) => {
                let b = &self.blocks[i];
                visit_norm(&format!("enc.{i}.norm"), &b.norm, f);
                f(format!("enc.{i}.lin1.weight"), &b.lin1.weight, TensorRole::Param);
                f(format!("enc.{i}.lin1.bias"), &b.lin1.bias, TensorRole::Param);
                f(format!("enc.{i}.lin2.weight"), &b.lin2.weight, TensorRole::Param);
                f(format!("enc.{i}.lin2.bias"), &b.lin2.bias, TensorRole::Param);
            }
            GroupId::Proj => {
                for (j, l) in self.proj.layers.iter().enumerate() {
                    f(format!("proj.{j}.lin.weight"), &l.lin.weight, TensorRole::Param);
                    f(format!("proj.{j}.lin.bias"), &l.lin.bias, TensorRole::Param);
                    visit_norm(&format!("proj.{j}.norm"), &l.norm, f);
                }
            }
            GroupId::Pred => {
                for (j, l) in self.pred.layers.iter().enumerate() {
                    f(format!("pred.{j}.lin.weight"), &l.lin.weight, TensorRole::Param);
                    f(format!("pred.{j}.lin.bias"), &l.lin.bias, TensorRole::Param);
                    visit_norm(&format!("pred.{j}.norm"), &l.norm, f);
                }
            }
        }
    }

    pub fn visit_group_mut(
        &mut self,
        group: GroupId,
        f: &mut impl FnMut(String, &mut Tensor<T>, TensorRole),
    ) {
        match group {
            GroupId::Enc(i) => {
                let b = &mut self.blocks[i];
                visit_norm_mut(&format!("enc.{i}.norm"), &mut b.norm, f);
                f(format!("enc.{i}.lin1.weight"), &mut b.lin1.weight, TensorRole::Param);
                f(format!("enc.{i}.lin1.bias"), &mut b.lin1.bias, TensorRole::Param);
                f(format!("enc.{i}.lin2.weight"), &mut b.lin2.weight, TensorRole::Param);
                f(format!("enc.{i}.lin2.bias"), &mut b.lin2.bias, TensorRole::Param);
            }
            GroupId::Proj => {
                for (j, l) in self.proj.layers.iter_mut().enumerate() {
                    f(format!("proj.{j}.lin.weight"), &mut l.lin.weight, TensorRole::Param);
                    f(format!("proj.{j}.lin.bias"), &mut l.lin.bias, TensorRole::Param);
                    visit_norm_mut(&format!("proj.{j}.norm"), &mut l.norm, f);
                }
            }
            GroupId::Pred => {
                for (j, l) in self.pred.layers.iter_mut().enumerate() {
                    f(format!("pred.{j}.lin.weight"), &mut l.lin.weight, TensorRole::Param);
                    f(format!("pred.{j}.lin.bias"), &mut l.lin.bias, TensorRole::Param);
                    visit_norm_mut(&format!("pred.{j}.norm"), &mut l.norm, f);
                }
            }
        }
    }

    /// Visit every tensor of the model in canonical order.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor<T>, TensorRole)) {
        for g in self.spec.all_groups() {
            self.visit_group(g, f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor<T>, TensorRole)) {
        for g in self.spec.all_groups() {
            self.visit_group_mut(g, f);
        }
    }

    /// Named clones of all tensors in the given groups, canonical order.
    pub fn group_tensors(&self, groups: &[GroupId]) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for &g in groups {
            self.visit_group(g, &mut |name, t, _| out.push((name, t.clone())));
        }
        out
    }

    /// Overwrite tensors by name; shapes must match. Unknown names error.
    pub fn set_tensors(&mut self, tensors: &BTreeMap<String, Tensor<T>>) -> Result<(), TensorError> {
        let mut remaining = tensors.len();
        let mut bad: Option<TensorError> = None;
        self.visit_mut(&mut |name, t, _| {
            if let Some(new) = tensors.get(&name) {
                if new.shape() != t.shape() {
                    bad.get_or_insert(TensorError::DimMismatch {
                        op: "set_tensors",
                        lhs: t.shape().to_vec(),
                        rhs: new.shape().to_vec(),
                    });
                    return;
                }
                *t = new.clone();
                remaining -= 1;
            }
        });
        if let Some(e) = bad {
            return Err(e);
        }
        if remaining != 0 {
            return Err(TensorError::Contract(format!(
                "set_tensors: {remaining} names not present in the model"
            )));
        }
        Ok(())
    }

    /// Trainable parameter element count over all S blocks plus heads.
    pub fn num_param_elems(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t, role| {
            if role == TensorRole::Param {
                n += t.numel();
            }
        });
        n
    }

    /// Buffer element count over all S blocks plus heads.
    pub fn num_buffer_elems(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t, role| {
            if role == TensorRole::Buffer {
                n += t.numel();
            }
        });
        n
    }

    /// Names of parameters the optimizer may update: blocks in
    /// `frozen_prefix..active_depth` plus both heads, params only.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in self.frozen_prefix..self.active_depth {
            self.visit_group(GroupId::Enc(i), &mut |name, _, role| {
                if role == TensorRole::Param {
                    out.push(name);
                }
            });
        }
        for g in [GroupId::Proj, GroupId::Pred] {
            self.visit_group(g, &mut |name, _, role| {
                if role == TensorRole::Param {
                    out.push(name);
                }
            });
        }
        out
    }

    /// Batch-norm parameter set addressed by prefix, e.g. `enc.1.norm`.
    pub fn bn_params_mut(&mut self, prefix: &str) -> Option<&mut BatchNormParams<T>> {
        let mut parts = prefix.split('.');
        match (parts.next(), parts.next(), parts.next()) {
            (Some("enc"), Some(i), Some("norm")) => {
                let i: usize = i.parse().ok()?;
                self.blocks.get_mut(i).map(|b| &mut b.norm)
            }
            (Some("proj"), Some(j), Some("norm")) => {
                let j: usize = j.parse().ok()?;
                self.proj.layers.get_mut(j).map(|l| &mut l.norm)
            }
            (Some("pred"), Some(j), Some("norm")) => {
                let j: usize = j.parse().ok()?;
                self.pred.layers.get_mut(j).map(|l| &mut l.norm)
            }
            _ => None,
        }
    }

    /// Bitwise equality of all tensors (and depth bookkeeping).
    pub fn bit_eq(&self, other: &ModelState<T>) -> bool {
        if self.active_depth != other.active_depth || self.spec != other.spec {
            return false;
        }
        let mut a = Vec::new();
        self.visit(&mut |name, t, _| a.push((name, t)));
        let mut b = Vec::new();
        other.visit(&mut |name, t, _| b.push((name, t)));
        a.len() == b.len()
            && a.iter().zip(&b).all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }
}

/// Graph-building context for one forward pass. Trainable tensors enter the
/// graph as parameters and are recorded by name; everything else enters as
/// constants. In train mode batch norms use batch statistics, and the batch
/// statistics of trainable norms are captured for running-buffer updates.
pub struct ForwardCtx<'g, T: Scalar> {
    pub graph: &'g mut Graph<T>,
    pub train: bool,
    pub trainable: BTreeMap<String, NodeId>,
    pub bn_stats: Vec<(String, Tensor<T>, Tensor<T>)>,
}

impl<'g, T: Scalar> ForwardCtx<'g, T> {
    pub fn new(graph: &'g mut Graph<T>, train: bool) -> Self {
        ForwardCtx { graph, train, trainable: BTreeMap::new(), bn_stats: Vec::new() }
    }

    fn leaf(&mut self, name: String, t: &Tensor<T>, trainable: bool) -> NodeId {
        if trainable {
            // Both views reference the same parameters; reuse the node so
            // gradients accumulate across uses.
            if let Some(&id) = self.trainable.get(&name) {
                return id;
            }
            let id = self.graph.param(t.clone());
            self.trainable.insert(name, id);
            id
        } else {
            self.graph.input(t.clone())
        }
    }

    pub fn linear(
        &mut self,
        x: NodeId,
        lp: &LinearParams<T>,
        name: &str,
        trainable: bool,
    ) -> Result<NodeId, TensorError> {
        let w = self.leaf(format!("{name}.weight"), &lp.weight, trainable);
        let b = self.leaf(format!("{name}.bias"), &lp.bias, trainable);
        let y = self.graph.matmul(x, w)?;
        self.graph.add_row_bias(y, b)
    }

    pub fn batch_norm(
        &mut self,
        x: NodeId,
        bn: &BatchNormParams<T>,
        name: &str,
        trainable: bool,
    ) -> Result<NodeId, TensorError> {
        let gamma = self.leaf(format!("{name}.gamma"), &bn.gamma, trainable);
        let beta = self.leaf(format!("{name}.beta"), &bn.beta, trainable);
        if self.train {
            let (y, mean, var) = self.graph.batch_norm_train(x, gamma, beta, T::of(BN_EPS))?;
            if trainable {
                self.bn_stats.push((name.to_string(), mean, var));
            }
            Ok(y)
        } else {
            self.graph.batch_norm_eval(x, gamma, beta, &bn.running_mean, &bn.running_var, T::of(BN_EPS))
        }
    }

    pub fn block(
        &mut self,
        x: NodeId,
        blk: &Block<T>,
        name: &str,
        trainable: bool,
    ) -> Result<NodeId, TensorError> {
        let n = self.batch_norm(x, &blk.norm, &format!("{name}.norm"), trainable)?;
        let h = self.linear(n, &blk.lin1, &format!("{name}.lin1"), trainable)?;
        let h = self.graph.gelu(h);
        let y = self.linear(h, &blk.lin2, &format!("{name}.lin2"), trainable)?;
        if blk.residual {
            self.graph.add(y, x)
        } else {
            Ok(y)
        }
    }

    pub fn mlp_head(
        &mut self,
        x: NodeId,
        head: &Head<T>,
        name: &str,
        trainable: bool,
    ) -> Result<NodeId, TensorError> {
        let mut cur = x;
        for (j, layer) in head.layers.iter().enumerate() {
            cur = self.linear(cur, &layer.lin, &format!("{name}.{j}.lin"), trainable)?;
            cur = self.batch_norm(cur, &layer.norm, &format!("{name}.{j}.norm"), trainable)?;
            if layer.relu {
                cur = self.graph.relu(cur);
            }
        }
        Ok(cur)
    }

    /// Compose encoder blocks `0..depth`. Blocks below `trainable_from` (or
    /// all of them, when `None`) enter as constants and contribute no
    /// gradient-requiring nodes.
    pub fn encoder(
        &mut self,
        blocks: &[Block<T>],
        x: NodeId,
        depth: usize,
        trainable_from: Option<usize>,
        name_prefix: &str,
    ) -> Result<NodeId, TensorError> {
        let mut cur = x;
        for (i, blk) in blocks.iter().enumerate().take(depth) {
            let trainable = trainable_from.is_some_and(|from| i >= from);
            cur = self.block(cur, blk, &format!("{name_prefix}.{i}"), trainable)?;
        }
        Ok(cur)
    }
}

/// Plain forward through encoder blocks `1..depth`; never mutates the model.
/// In train mode batch statistics are used (running buffers are not updated
/// through this entry point); in eval mode running statistics are used.
pub fn forward_encoder<T: Scalar>(
    m: &ModelState<T>,
    x: &Tensor<T>,
    depth: usize,
    train: bool,
) -> Result<Tensor<T>, TensorError> {
    if depth == 0 || depth > m.active_depth {
        return Err(TensorError::Contract(format!(
            "forward depth {depth} outside 1..={} (active depth)",
            m.active_depth
        )));
    }
    if x.cols() != m.spec.input_dim {
        return Err(TensorError::DimMismatch {
            op: "forward_encoder",
            lhs: x.shape().to_vec(),
            rhs: vec![x.rows(), m.spec.input_dim],
        });
    }
    let mut graph = Graph::new();
    let input = graph.input(x.clone());
    let mut ctx = ForwardCtx::new(&mut graph, train);
    let out = ctx.encoder(&m.blocks, input, depth, None, "enc")?;
    Ok(graph.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> ModelSpec {
        ModelSpec {
            input_dim: 6,
            num_layers: 2,
            block_hidden_dim: 8,
            block_out_dim: 6,
            proj_hidden: 8,
            proj_out: 4,
            pred_hidden: 8,
        }
    }

    #[test]
    fn build_is_deterministic() {
        let spec = small_spec();
        let a = build_model::<f32>(&spec, 9);
        let b = build_model::<f32>(&spec, 9);
        assert!(a.bit_eq(&b));
        let c = build_model::<f32>(&spec, 10);
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn single_layer_spec_has_one_block() {
        let spec = ModelSpec { num_layers: 1, ..small_spec() };
        let m = build_model::<f64>(&spec, 1);
        assert_eq!(m.blocks.len(), 1);
    }

    #[test]
    fn param_count_matches_hand_derived_closed_form() {
        // input 64, S=3, hidden 32, out 32, heads proj_hidden 64 / proj_out 16
        // / pred_hidden 64.
        let spec = ModelSpec {
            input_dim: 64,
            num_layers: 3,
            block_hidden_dim: 32,
            block_out_dim: 32,
            proj_hidden: 64,
            proj_out: 16,
            pred_hidden: 64,
        };
        let m = build_model::<f64>(&spec, 0);

        // Block 1 (in 64): norm affine 2*64; lin1 64*32+32; lin2 32*32+32.
        let block1 = 2 * 64 + (64 * 32 + 32) + (32 * 32 + 32);
        // Blocks 2..3 (in 32): norm affine 2*32; lin1 32*32+32; lin2 32*32+32.
        let block_rest = 2 * 32 + (32 * 32 + 32) + (32 * 32 + 32);
        // Projection head: (32->64, BN) + (64->64, BN) + (64->16, BN).
        let proj = (32 * 64 + 64 + 2 * 64) + (64 * 64 + 64 + 2 * 64) + (64 * 16 + 16 + 2 * 16);
        // Prediction head: (16->64, BN) + (64->16, BN).
        let pred = (16 * 64 + 64 + 2 * 64) + (64 * 16 + 16 + 2 * 16);
        let expected = block1 + 2 * block_rest + proj + pred;

        assert_eq!(m.num_param_elems(), expected);
        // Buffers: two per normalized feature.
        let buffers = 2 * 64 + 2 * (2 * 32) + (2 * 64 + 2 * 64 + 2 * 16) + (2 * 64 + 2 * 16);
        assert_eq!(m.num_buffer_elems(), buffers);
        assert_eq!(
            spec.all_groups().iter().map(|&g| spec.group_elems(g)).sum::<usize>(),
            expected + buffers
        );
    }

    #[test]
    fn blocks_after_first_share_param_counts() {
        let spec = small_spec();
        assert_eq!(spec.block_param_elems(1), spec.block_param_elems(1));
        let wide = ModelSpec { num_layers: 5, ..spec };
        for i in 2..5 {
            assert_eq!(wide.block_param_elems(i), wide.block_param_elems(1));
        }
    }

    #[test]
    fn forward_depth_contract() {
        let m = build_model::<f64>(&small_spec(), 3);
        let x = Tensor::zeros(&[2, 6]);
        assert!(forward_encoder(&m, &x, 3, false).is_err());
        assert!(forward_encoder(&m, &x, 0, false).is_err());
        assert!(forward_encoder(&m, &x, 2, false).is_ok());
    }

    #[test]
    fn frozen_forward_requires_no_encoder_gradients() {
        let m = build_model::<f64>(&small_spec(), 5);
        let x = Tensor::ones(&[3, 6]);
        let mut graph = Graph::new();
        let input = graph.input(x);
        let mut ctx = ForwardCtx::new(&mut graph, true);
        // frozen_prefix == depth: every block enters as constants.
        let out = ctx.encoder(&m.blocks, input, 2, Some(2), "enc").unwrap();
        assert!(ctx.trainable.is_empty());
        let s = graph.sum(out);
        let grads = graph.backward(s).unwrap();
        // No parameters were registered, so no gradient slots exist.
        assert!(graph.params().is_empty());
        let _ = grads;
    }

    #[test]
    fn forward_matches_straight_line_block_math() {
        // Independent reimplementation of one block at fixed seed, B=2.
        let spec = ModelSpec { num_layers: 1, ..small_spec() };
        let m = build_model::<f64>(&spec, 123);
        let x = Tensor::from_rows(&[
            vec![0.5, -1.0, 0.25, 2.0, -0.75, 0.1],
            vec![1.5, 0.0, -0.5, 0.3, 0.9, -1.2],
        ]);
        let got = forward_encoder(&m, &x, 1, true).unwrap();

        let b = &m.blocks[0];
        let (bsz, d) = (2usize, 6usize);
        let h = spec.block_hidden_dim;
        let o = spec.block_out_dim;
        // Batch norm with batch statistics (biased variance).
        let mut mean = vec![0.0; d];
        for i in 0..bsz {
            for j in 0..d {
                mean[j] += x.row(i)[j];
            }
        }
        mean.iter_mut().for_each(|v| *v /= bsz as f64);
        let mut var = vec![0.0; d];
        for i in 0..bsz {
            for j in 0..d {
                var[j] += (x.row(i)[j] - mean[j]).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v /= bsz as f64);
        let mut normed = vec![0.0; bsz * d];
        for i in 0..bsz {
            for j in 0..d {
                let xhat = (x.row(i)[j] - mean[j]) / (var[j] + BN_EPS).sqrt();
                normed[i * d + j] =
                    b.norm.gamma.data()[j] * xhat + b.norm.beta.data()[j];
            }
        }
        // lin1 + gelu.
        let mut hid = vec![0.0; bsz * h];
        for i in 0..bsz {
            for k in 0..h {
                let mut s = b.lin1.bias.data()[k];
                for j in 0..d {
                    s += normed[i * d + j] * b.lin1.weight.data()[j * h + k];
                }
                let c = (2.0 / std::f64::consts::PI).sqrt();
                let t = (c * (s + 0.044715 * s * s * s)).tanh();
                hid[i * h + k] = 0.5 * s * (1.0 + t);
            }
        }
        // lin2 + residual (in == out for this spec).
        for i in 0..bsz {
            for k in 0..o {
                let mut s = b.lin2.bias.data()[k];
                for j in 0..h {
                    s += hid[i * h + j] * b.lin2.weight.data()[j * o + k];
                }
                s += x.row(i)[k];
                assert!(
                    (got.row(i)[k] - s).abs() < 1e-12,
                    "row {i} col {k}: {} vs {s}",
                    got.row(i)[k]
                );
            }
        }
    }

    #[test]
    fn set_tensors_rejects_unknown_names() {
        let mut m = build_model::<f64>(&small_spec(), 4);
        let mut map = BTreeMap::new();
        map.insert("enc.9.lin1.weight".to_string(), Tensor::zeros(&[6, 8]));
        assert!(m.set_tensors(&map).is_err());
    }
}
