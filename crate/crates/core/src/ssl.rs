//! Local self-supervised training: two-view augmentation, InfoNCE with a
//! momentum target branch, and the representation-alignment auxiliary loss
//! against a frozen global encoder.
//!
//! A batch step builds one graph: queries run through the online encoder and
//! both heads, keys through the momentum branch (constants, no gradient),
//! and — when alignment is active — global representations through the
//! broadcast encoder snapshot (also constants).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, NodeId};
use crate::model::{ForwardCtx, ModelState, MomentumBranch, L2_EPS};
use crate::optim::{AdamW, LrSchedule};
use crate::rng::{mix, mix2, mix3, normal, rng_from};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

const TAG_SHUFFLE: u64 = 0x53_4846;
const TAG_BATCH: u64 = 0x42_4154;

#[derive(Debug, Error)]
pub enum SslError {
    #[error("non-finite loss at batch {batch}")]
    NonFiniteLoss { batch: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Hyperparameters of the local SSL step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SslConfig {
    pub temperature: f64,
    pub momentum: f64,
    pub align_weight: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub normalize_alignment: bool,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            temperature: 0.2,
            momentum: 0.99,
            align_weight: 0.01,
            local_epochs: 3,
            batch_size: 32,
            normalize_alignment: true,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.temperature <= 0.0 {
            return Err("ssl.temperature must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err("ssl.momentum must be in [0, 1]".into());
        }
        if self.align_weight < 0.0 {
            return Err("ssl.align_weight must be >= 0".into());
        }
        if self.local_epochs < 1 {
            return Err("ssl.local_epochs must be >= 1".into());
        }
        if self.batch_size < 2 {
            return Err("ssl.batch_size must be >= 2 (batch norm minimum)".into());
        }
        Ok(())
    }
}

/// Stochastic view policy: padded random crop, horizontal flip, Gaussian
/// jitter, optional cutout. Crop/flip/cutout require rows to be square
/// images; jitter applies to any feature vector.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub crop_pad: usize,
    pub flip_prob: f64,
    pub jitter_sigma: f64,
    pub cutout_frac: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy { crop_pad: 2, flip_prob: 0.5, jitter_sigma: 0.1, cutout_frac: 0.25 }
    }
}

impl AugmentPolicy {
    pub fn needs_image(&self) -> bool {
        self.crop_pad > 0 || self.flip_prob > 0.0 || self.cutout_frac > 0.0
    }

    pub fn is_identity(&self) -> bool {
        self.crop_pad == 0
            && self.flip_prob == 0.0
            && self.jitter_sigma == 0.0
            && self.cutout_frac == 0.0
    }
}

fn square_side(d: usize) -> Option<usize> {
    let side = (d as f64).sqrt().round() as usize;
    (side * side == d).then_some(side)
}

fn augment_row<T: Scalar>(
    row: &[T],
    side: Option<usize>,
    policy: &AugmentPolicy,
    seed: u64,
) -> Vec<T> {
    let mut rng = rng_from(seed);
    let mut out: Vec<T> = row.to_vec();
    if let Some(side) = side {
        if policy.crop_pad > 0 {
            let pad = policy.crop_pad;
            let dy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
            let dx = rng.gen_range(0..=2 * pad) as isize - pad as isize;
            let mut shifted = vec![T::zero(); out.len()];
            for r in 0..side {
                for c in 0..side {
                    let sr = r as isize + dy;
                    let sc = c as isize + dx;
                    if sr >= 0 && sr < side as isize && sc >= 0 && sc < side as isize {
                        shifted[r * side + c] = out[sr as usize * side + sc as usize];
                    }
                }
            }
            out = shifted;
        }
        if policy.flip_prob > 0.0 && rng.gen::<f64>() < policy.flip_prob {
            for r in 0..side {
                out[r * side..(r + 1) * side].reverse();
            }
        }
    }
    if policy.jitter_sigma > 0.0 {
        for v in out.iter_mut() {
            *v = *v + T::of(policy.jitter_sigma * normal(&mut rng));
        }
    }
    if let Some(side) = side {
        if policy.cutout_frac > 0.0 {
            let k = ((side as f64 * policy.cutout_frac).round() as usize).clamp(1, side);
            let top = rng.gen_range(0..=side - k);
            let left = rng.gen_range(0..=side - k);
            for r in top..top + k {
                for c in left..left + k {
                    out[r * side + c] = T::zero();
                }
            }
        }
    }
    out
}

/// Produce two independently augmented views of each row. Deterministic in
/// `(seed, row index, view index)`: the per-row sub-seed is
/// `mix3(seed, row, view)`.
pub fn augment<T: Scalar>(
    x: &Tensor<T>,
    policy: &AugmentPolicy,
    seed: u64,
) -> Result<(Tensor<T>, Tensor<T>), TensorError> {
    if policy.is_identity() {
        return Ok((x.clone(), x.clone()));
    }
    let d = x.cols();
    let side = if policy.needs_image() {
        Some(square_side(d).ok_or_else(|| {
            TensorError::Contract(format!(
                "image augmentations require square rows, got dim {d}"
            ))
        })?)
    } else {
        None
    };
    let rows = x.rows();
    let mut v1 = Vec::with_capacity(rows * d);
    let mut v2 = Vec::with_capacity(rows * d);
    for i in 0..rows {
        v1.extend(augment_row(x.row(i), side, policy, mix3(seed, i as u64, 0, 0)));
        v2.extend(augment_row(x.row(i), side, policy, mix3(seed, i as u64, 1, 0)));
    }
    Ok((Tensor::from_vec(vec![rows, d], v1)?, Tensor::from_vec(vec![rows, d], v2)?))
}

fn ema_tensor<T: Scalar>(target: &mut Tensor<T>, online: &Tensor<T>, mu: T) -> Result<(), TensorError> {
    if target.shape() != online.shape() {
        return Err(TensorError::DimMismatch {
            op: "momentum_update",
            lhs: target.shape().to_vec(),
            rhs: online.shape().to_vec(),
        });
    }
    let one_mu = T::one() - mu;
    for (t, &o) in target.data_mut().iter_mut().zip(online.data()) {
        *t = mu * *t + one_mu * o;
    }
    Ok(())
}

/// Exponential moving average of the target branch toward the online branch:
/// every target tensor becomes `mu*target + (1-mu)*online`, applied to the
/// momentum encoder and momentum projection head only. `mu = 1` leaves the
/// target bitwise unchanged.
pub fn momentum_update<T: Scalar>(
    online: &ModelState<T>,
    target: &mut MomentumBranch<T>,
    mu: f64,
) -> Result<(), TensorError> {
    if mu == 1.0 {
        return Ok(());
    }
    let mu = T::of(mu);
    if target.blocks.len() != online.blocks.len()
        || target.proj.layers.len() != online.proj.layers.len()
    {
        return Err(TensorError::Contract(
            "momentum branch does not match the online branch".into(),
        ));
    }
    for (tb, ob) in target.blocks.iter_mut().zip(&online.blocks) {
        ema_tensor(&mut tb.norm.gamma, &ob.norm.gamma, mu)?;
        ema_tensor(&mut tb.norm.beta, &ob.norm.beta, mu)?;
        ema_tensor(&mut tb.norm.running_mean, &ob.norm.running_mean, mu)?;
        ema_tensor(&mut tb.norm.running_var, &ob.norm.running_var, mu)?;
        ema_tensor(&mut tb.lin1.weight, &ob.lin1.weight, mu)?;
        ema_tensor(&mut tb.lin1.bias, &ob.lin1.bias, mu)?;
        ema_tensor(&mut tb.lin2.weight, &ob.lin2.weight, mu)?;
        ema_tensor(&mut tb.lin2.bias, &ob.lin2.bias, mu)?;
    }
    for (tl, ol) in target.proj.layers.iter_mut().zip(&online.proj.layers) {
        ema_tensor(&mut tl.lin.weight, &ol.lin.weight, mu)?;
        ema_tensor(&mut tl.lin.bias, &ol.lin.bias, mu)?;
        ema_tensor(&mut tl.norm.gamma, &ol.norm.gamma, mu)?;
        ema_tensor(&mut tl.norm.beta, &ol.norm.beta, mu)?;
        ema_tensor(&mut tl.norm.running_mean, &ol.norm.running_mean, mu)?;
        ema_tensor(&mut tl.norm.running_var, &ol.norm.running_var, mu)?;
    }
    Ok(())
}

/// Contrastive loss value on plain tensors (scratch graph).
pub fn infonce_value<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, tau: f64) -> Result<T, TensorError> {
    let mut g = Graph::new();
    let qn = g.input(q.clone());
    let kn = g.input(k.clone());
    let l = g.infonce(qn, kn, T::of(tau))?;
    Ok(g.value(l).scalar_value())
}

/// Symmetric alignment loss value on plain tensors: the contrastive form over
/// local queries and detached global keys, summed over both view pairings.
pub fn alignment_loss_value<T: Scalar>(
    z1_local: &Tensor<T>,
    z2_local: &Tensor<T>,
    z1_global: &Tensor<T>,
    z2_global: &Tensor<T>,
    tau: f64,
) -> Result<T, TensorError> {
    let a = infonce_value(z1_local, z2_global, tau)?;
    let b = infonce_value(z2_local, z1_global, tau)?;
    Ok(a + b)
}

/// One batch's loss graph, plus everything needed to apply the update.
pub struct BatchLoss<T: Scalar> {
    pub loss: NodeId,
    pub con_value: f64,
    pub align_value: Option<f64>,
    pub trainable: BTreeMap<String, NodeId>,
    pub bn_stats: Vec<(String, Tensor<T>, Tensor<T>)>,
}

/// Build the full local-step loss for one two-view batch:
/// `l_con + align_weight * l_align`, with
/// `l_con = l(q1,k2,tau) + l(q2,k1,tau)` through the online and momentum
/// branches, and `l_align` through the frozen global encoder when active.
pub fn build_batch_loss<T: Scalar>(
    graph: &mut Graph<T>,
    model: &ModelState<T>,
    momentum: &MomentumBranch<T>,
    global: Option<&ModelState<T>>,
    x1: &Tensor<T>,
    x2: &Tensor<T>,
    cfg: &SslConfig,
) -> Result<BatchLoss<T>, TensorError> {
    let depth = model.active_depth;
    let tau = T::of(cfg.temperature);
    let eps = T::of(L2_EPS);
    let align_active = cfg.align_weight > 0.0 && global.is_some();
    if let Some(gl) = global {
        if gl.active_depth != depth {
            return Err(TensorError::Contract(format!(
                "global snapshot depth {} != client depth {depth}",
                gl.active_depth
            )));
        }
    }

    let mut ctx = ForwardCtx::new(graph, true);
    let x1n = ctx.graph.input(x1.clone());
    let x2n = ctx.graph.input(x2.clone());

    // Online branch: q = normalize(P(H(F(x)))).
    let z1 = ctx.encoder(&model.blocks, x1n, depth, Some(model.frozen_prefix), "enc")?;
    let z2 = ctx.encoder(&model.blocks, x2n, depth, Some(model.frozen_prefix), "enc")?;
    let h1 = ctx.mlp_head(z1, &model.proj, "proj", true)?;
    let h2 = ctx.mlp_head(z2, &model.proj, "proj", true)?;
    let p1 = ctx.mlp_head(h1, &model.pred, "pred", true)?;
    let p2 = ctx.mlp_head(h2, &model.pred, "pred", true)?;
    let q1 = ctx.graph.l2_normalize(p1, eps)?;
    let q2 = ctx.graph.l2_normalize(p2, eps)?;

    // Momentum branch: k = normalize(H_k(F_k(x))), constants throughout.
    let mz1 = ctx.encoder(&momentum.blocks, x1n, depth, None, "mom.enc")?;
    let mz2 = ctx.encoder(&momentum.blocks, x2n, depth, None, "mom.enc")?;
    let mh1 = ctx.mlp_head(mz1, &momentum.proj, "mom.proj", false)?;
    let mh2 = ctx.mlp_head(mz2, &momentum.proj, "mom.proj", false)?;
    let k1 = ctx.graph.l2_normalize(mh1, eps)?;
    let k2 = ctx.graph.l2_normalize(mh2, eps)?;

    let c1 = ctx.graph.infonce(q1, k2, tau)?;
    let c2 = ctx.graph.infonce(q2, k1, tau)?;
    let con = ctx.graph.add(c1, c2)?;

    let mut loss = con;
    let mut align_value = None;
    if align_active {
        let gl = global.expect("align_active implies a snapshot");
        let g1 = ctx.encoder(&gl.blocks, x1n, depth, None, "glob.enc")?;
        let g2 = ctx.encoder(&gl.blocks, x2n, depth, None, "glob.enc")?;
        let (zl1, zl2, zg1, zg2) = if cfg.normalize_alignment {
            (
                ctx.graph.l2_normalize(z1, eps)?,
                ctx.graph.l2_normalize(z2, eps)?,
                ctx.graph.l2_normalize(g1, eps)?,
                ctx.graph.l2_normalize(g2, eps)?,
            )
        } else {
            (z1, z2, g1, g2)
        };
        let a1 = ctx.graph.infonce(zl1, zg2, tau)?;
        let a2 = ctx.graph.infonce(zl2, zg1, tau)?;
        let align = ctx.graph.add(a1, a2)?;
        align_value = Some(ctx.graph.value(align).scalar_value().widen());
        let weighted = ctx.graph.scale(align, T::of(cfg.align_weight));
        loss = ctx.graph.add(con, weighted)?;
    }

    let con_value = ctx.graph.value(con).scalar_value().widen();
    let ForwardCtx { trainable, bn_stats, .. } = ctx;
    Ok(BatchLoss { loss, con_value, align_value, trainable, bn_stats })
}

/// Per-epoch metrics: one entry per processed batch.
#[derive(Debug, Default, Clone)]
pub struct EpochMetrics {
    pub total: Vec<f64>,
    pub contrastive: Vec<f64>,
    pub alignment: Vec<f64>,
}

impl EpochMetrics {
    pub fn mean_total(&self) -> f64 {
        if self.total.is_empty() {
            0.0
        } else {
            self.total.iter().sum::<f64>() / self.total.len() as f64
        }
    }
}

/// Mutable training state threaded through an epoch.
pub struct LocalTrainer<'a, T: Scalar> {
    pub model: &'a mut ModelState<T>,
    pub momentum: &'a mut MomentumBranch<T>,
    pub optimizer: &'a mut AdamW<T>,
    pub schedule: &'a LrSchedule,
    pub step: &'a mut u64,
}

/// One local epoch: shuffle, drop the trailing short batch, and for each
/// batch augment, build the loss, update batch-norm buffers of trainable
/// norms, step AdamW over the trainable set, and EMA the momentum branch.
pub fn local_ssl_epoch<T: Scalar>(
    trainer: LocalTrainer<'_, T>,
    global: Option<&ModelState<T>>,
    features: &Tensor<T>,
    cfg: &SslConfig,
    policy: &AugmentPolicy,
    epoch_seed: u64,
) -> Result<EpochMetrics, SslError> {
    let n = features.rows();
    let batch = cfg.batch_size;
    let mut metrics = EpochMetrics::default();
    if n < batch {
        return Ok(metrics);
    }

    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut rng_from(mix(epoch_seed, TAG_SHUFFLE)));

    for (b, chunk) in indices.chunks_exact(batch).enumerate() {
        let xb = features.gather_rows(chunk);
        let batch_seed = mix2(epoch_seed, TAG_BATCH, b as u64);
        let (x1, x2) = augment(&xb, policy, batch_seed)?;

        let mut graph = Graph::new();
        let bl = build_batch_loss(&mut graph, trainer.model, trainer.momentum, global, &x1, &x2, cfg)?;

        let loss_value = graph.value(bl.loss).scalar_value();
        if !loss_value.is_finite() {
            return Err(SslError::NonFiniteLoss { batch: b });
        }

        for (name, mean, var) in &bl.bn_stats {
            if let Some(bn) = trainer.model.bn_params_mut(name) {
                bn.update_running(mean, var);
            }
        }

        let grads = graph.backward(bl.loss)?;
        let grad_map: BTreeMap<String, Tensor<T>> = bl
            .trainable
            .iter()
            .map(|(name, &id)| (name.clone(), graph.grad_of(&grads, id)))
            .collect();

        let lr = trainer.schedule.lr_at(*trainer.step)?;
        trainer.optimizer.step(trainer.model, &grad_map, lr)?;
        momentum_update(trainer.model, trainer.momentum, cfg.momentum)?;
        *trainer.step += 1;

        metrics.total.push(loss_value.widen());
        metrics.contrastive.push(bl.con_value);
        if let Some(a) = bl.align_value {
            metrics.alignment.push(a);
        }
    }
    Ok(metrics)
}
