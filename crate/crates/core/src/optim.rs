//! AdamW with decoupled weight decay, and the learning-rate strategies.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::ModelState;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Moments<T> {
    m: Tensor<T>,
    v: Tensor<T>,
    step: u64,
}

/// AdamW state. Moment tensors exist exactly for the parameters that have
/// received gradients, i.e. the trainable set.
pub struct AdamW<T> {
    pub weight_decay: f64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW { weight_decay, moments: BTreeMap::new() }
    }

    pub fn tracked_params(&self) -> impl Iterator<Item = &String> {
        self.moments.keys()
    }

    /// One optimizer step over the model's trainable set. `grads` must cover
    /// exactly that set; mismatches and non-finite gradients are errors.
    pub fn step(
        &mut self,
        model: &mut ModelState<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
    ) -> Result<(), TensorError> {
        let trainable = model.trainable_names();
        if trainable.len() != grads.len() || trainable.iter().any(|n| !grads.contains_key(n)) {
            return Err(TensorError::Contract(format!(
                "gradients must cover exactly the trainable set ({} trainable, {} provided)",
                trainable.len(),
                grads.len()
            )));
        }
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(TensorError::NonFinite(format!("gradient of {name}")));
            }
        }

        let lr_t = T::of(lr);
        let wd = T::of(self.weight_decay);
        let b1 = T::of(BETA1);
        let b2 = T::of(BETA2);
        let eps = T::of(ADAM_EPS);

        let moments = &mut self.moments;
        let mut failure: Option<TensorError> = None;
        model.visit_mut(&mut |name, tensor, _| {
            let Some(grad) = grads.get(&name) else { return };
            if failure.is_some() {
                return;
            }
            if grad.shape() != tensor.shape() {
                failure = Some(TensorError::DimMismatch {
                    op: "adamw_step",
                    lhs: tensor.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
                return;
            }
            let slot = moments.entry(name).or_insert_with(|| Moments {
                m: Tensor::zeros(tensor.shape()),
                v: Tensor::zeros(tensor.shape()),
                step: 0,
            });
            slot.step += 1;
            let bc1 = T::one() - T::of(BETA1.powi(slot.step as i32));
            let bc2 = T::one() - T::of(BETA2.powi(slot.step as i32));
            for ((p, &g), (m, v)) in tensor
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(slot.m.data_mut().iter_mut().zip(slot.v.data_mut()))
            {
                // Decoupled weight decay, separate from the Adam update.
                *p = *p - lr_t * wd * *p;
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        Ok(())
    }
}

/// Learning-rate strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrKind {
    Fixed,
    Cosine,
    Cyclic,
}

/// Learning-rate schedule. The effective base is `base_lr * batch_size / 256`
/// (linear scaling); cosine decays over the whole horizon after a linear
/// warmup; cyclic restarts the cosine at every stage boundary.
#[derive(Debug, Clone)]
pub struct LrSchedule {
    pub kind: LrKind,
    pub base_lr: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    /// Steps per stage; used by `Cyclic` only.
    pub stage_steps: Vec<u64>,
    pub warmup_steps: u64,
}

impl LrSchedule {
    pub fn effective_base(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    /// Learning rate at a global step in `0..total_steps`.
    pub fn lr_at(&self, step: u64) -> Result<f64, TensorError> {
        if step >= self.total_steps {
            return Err(TensorError::Contract(format!(
                "lr_at step {step} >= total_steps {}",
                self.total_steps
            )));
        }
        let base = self.effective_base();
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return Ok(base * (step + 1) as f64 / self.warmup_steps as f64);
        }
        match self.kind {
            LrKind::Fixed => Ok(base),
            LrKind::Cosine => {
                let t = (step - self.warmup_steps) as f64;
                let horizon = (self.total_steps - self.warmup_steps) as f64;
                Ok(base * 0.5 * (1.0 + (std::f64::consts::PI * t / horizon).cos()))
            }
            LrKind::Cyclic => {
                let mut remaining = step;
                for &len in &self.stage_steps {
                    if remaining < len {
                        let factor =
                            0.5 * (1.0 + (std::f64::consts::PI * remaining as f64 / len as f64).cos());
                        return Ok(base * factor);
                    }
                    remaining -= len;
                }
                Err(TensorError::Contract(format!(
                    "lr_at step {step} beyond cyclic stage table"
                )))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelSpec};

    fn tiny_model() -> ModelState<f64> {
        let spec = ModelSpec {
            input_dim: 4,
            num_layers: 1,
            block_hidden_dim: 4,
            block_out_dim: 4,
            proj_hidden: 4,
            proj_out: 2,
            pred_hidden: 4,
        };
        build_model(&spec, 5)
    }

    fn zero_grads(m: &ModelState<f64>) -> BTreeMap<String, Tensor<f64>> {
        let mut g = BTreeMap::new();
        let mut names = Vec::new();
        m.visit(&mut |n, t, _| names.push((n, t.shape().to_vec())));
        for name in m.trainable_names() {
            let shape = &names.iter().find(|(n, _)| *n == name).unwrap().1;
            g.insert(name, Tensor::zeros(shape));
        }
        g
    }

    #[test]
    fn zero_grads_no_decay_leaves_params_unchanged() {
        let mut m = tiny_model();
        let before = m.clone();
        let mut opt = AdamW::new(0.0);
        let grads = zero_grads(&m);
        opt.step(&mut m, &grads, 1e-3).unwrap();
        assert!(m.bit_eq(&before));
    }

    #[test]
    fn first_step_magnitude_is_lr_times_sign() {
        // p = 0, grad = g != 0, wd = 0: bias-corrected first step moves p by
        // about -lr * sign(g).
        let mut m = tiny_model();
        m.visit_mut(&mut |_, t, _| {
            for v in t.data_mut() {
                *v = 0.0;
            }
        });
        let mut grads = zero_grads(&m);
        let g = grads.get_mut("enc.0.lin1.weight").unwrap();
        for v in g.data_mut() {
            *v = 0.3;
        }
        let mut opt = AdamW::new(0.0);
        let lr = 1e-3;
        opt.step(&mut m, &grads, lr).unwrap();
        let mut seen = false;
        m.visit(&mut |name, t, _| {
            if name == "enc.0.lin1.weight" {
                seen = true;
                for &v in t.data() {
                    assert!((v + lr).abs() < lr * 1e-4, "expected about {}, got {v}", -lr);
                }
            }
        });
        assert!(seen);
    }

    #[test]
    fn quadratic_bowl_loss_strictly_decreases() {
        // Run the update rule on a scalar quadratic 0.5*p^2 for 10 steps.
        let mut m = tiny_model();
        let w = "enc.0.lin1.weight".to_string();
        m.visit_mut(&mut |name, t, _| {
            if name == w {
                for v in t.data_mut() {
                    *v = 2.0;
                }
            }
        });
        let mut opt = AdamW::new(0.0);
        let mut last = f64::INFINITY;
        for _ in 0..10 {
            let mut grads = zero_grads(&m);
            let mut loss = 0.0;
            m.visit(&mut |name, t, _| {
                if name == w {
                    loss = t.data().iter().map(|v| 0.5 * v * v).sum();
                }
            });
            let mut current = Tensor::zeros(&[1]);
            m.visit(&mut |name, t, _| {
                if name == w {
                    current = t.clone();
                }
            });
            grads.insert(w.clone(), current);
            opt.step(&mut m, &grads, 0.05).unwrap();
            assert!(loss < last, "loss {loss} did not decrease from {last}");
            last = loss;
        }
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let mut m = tiny_model();
        let mut grads = zero_grads(&m);
        grads.get_mut("proj.0.lin.bias").unwrap().data_mut()[0] = f64::NAN;
        let mut opt = AdamW::new(0.0);
        let err = opt.step(&mut m, &grads, 1e-3).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite(_)));
    }

    #[test]
    fn grads_must_cover_exactly_the_trainable_set() {
        let mut m = tiny_model();
        let mut grads = zero_grads(&m);
        grads.remove("pred.0.lin.bias");
        let mut opt = AdamW::new(0.0);
        assert!(opt.step(&mut m, &grads, 1e-3).is_err());
    }

    #[test]
    fn frozen_prefix_params_never_move() {
        let spec = ModelSpec {
            input_dim: 4,
            num_layers: 3,
            block_hidden_dim: 4,
            block_out_dim: 4,
            proj_hidden: 4,
            proj_out: 2,
            pred_hidden: 4,
        };
        let mut m = build_model::<f64>(&spec, 8);
        m.frozen_prefix = 2;
        let before = m.blocks[0].clone();
        let before1 = m.blocks[1].clone();
        let mut opt = AdamW::new(0.01);
        for _ in 0..5 {
            let mut grads = BTreeMap::new();
            let mut shapes = Vec::new();
            m.visit(&mut |n, t, _| shapes.push((n, t.shape().to_vec())));
            for name in m.trainable_names() {
                let shape = &shapes.iter().find(|(n, _)| *n == name).unwrap().1;
                grads.insert(name, Tensor::filled(shape, 0.1));
            }
            opt.step(&mut m, &grads, 1e-2).unwrap();
        }
        assert_eq!(m.blocks[0], before);
        assert_eq!(m.blocks[1], before1);
        // Moments exist exactly for the trainable set.
        let trainable = m.trainable_names();
        let tracked: Vec<_> = opt.tracked_params().cloned().collect();
        assert_eq!(tracked, trainable);
    }

    #[test]
    fn fixed_schedule_is_constant() {
        let s = LrSchedule {
            kind: LrKind::Fixed,
            base_lr: 1.5e-4,
            batch_size: 256,
            total_steps: 100,
            stage_steps: vec![],
            warmup_steps: 0,
        };
        for step in 0..100 {
            assert_eq!(s.lr_at(step).unwrap(), 1.5e-4);
        }
        assert!(s.lr_at(100).is_err());
    }

    #[test]
    fn cosine_midpoint_is_half_base() {
        let s = LrSchedule {
            kind: LrKind::Cosine,
            base_lr: 2e-3,
            batch_size: 256,
            total_steps: 100,
            stage_steps: vec![],
            warmup_steps: 0,
        };
        let mid = s.lr_at(50).unwrap();
        assert!((mid - 0.5 * 2e-3).abs() < 1e-12);
    }

    #[test]
    fn cyclic_restarts_identically_each_stage() {
        let stages = vec![7u64; 12];
        let s = LrSchedule {
            kind: LrKind::Cyclic,
            base_lr: 1e-3,
            batch_size: 128,
            total_steps: 84,
            stage_steps: stages.clone(),
            warmup_steps: 0,
        };
        let first = s.lr_at(0).unwrap();
        let mut offset = 0;
        for &len in &stages {
            assert_eq!(s.lr_at(offset).unwrap(), first);
            offset += len;
        }
    }

    #[test]
    fn cyclic_single_stage_equals_cosine_pointwise() {
        let total = 37;
        let cyc = LrSchedule {
            kind: LrKind::Cyclic,
            base_lr: 3e-3,
            batch_size: 64,
            total_steps: total,
            stage_steps: vec![total],
            warmup_steps: 0,
        };
        let cos = LrSchedule {
            kind: LrKind::Cosine,
            base_lr: 3e-3,
            batch_size: 64,
            total_steps: total,
            stage_steps: vec![],
            warmup_steps: 0,
        };
        for step in 0..total {
            assert_eq!(cyc.lr_at(step).unwrap(), cos.lr_at(step).unwrap());
        }
    }

    #[test]
    fn lr_stays_positive() {
        let s = LrSchedule {
            kind: LrKind::Cosine,
            base_lr: 1e-3,
            batch_size: 32,
            total_steps: 1000,
            stage_steps: vec![],
            warmup_steps: 10,
        };
        for step in 0..1000 {
            assert!(s.lr_at(step).unwrap() > 0.0);
        }
    }
}
