//! Central-finite-difference verification of every registered gradient rule.
//!
//! This is both a test oracle and a runtime command (`gradcheck`): at 64-bit
//! the analytic gradient of each op, and of the composite local loss on a
//! two-block model, must match central differences to 1e-4.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, NodeId};
use crate::model::{build_model, ModelSpec, ModelState, MomentumBranch};
use crate::rng::{mix, rng_from};
use crate::scalar::Scalar;
use crate::ssl::{build_batch_loss, SslConfig};
use crate::tensor::{Tensor, TensorError};

/// Default step for 64-bit central differences.
pub const DEFAULT_H: f64 = 1e-5;
/// Pass threshold for the suite.
pub const TOLERANCE: f64 = 1e-4;

/// Environment variable naming an op whose analytic gradient the suite
/// deliberately corrupts; negative-control hook for tests only.
pub const CORRUPT_ENV: &str = "LWFS_GRADCHECK_CORRUPT";

/// Compare analytic gradients against central differences
/// `(f(p+h) - f(p-h)) / 2h` per coordinate. Returns the worst relative error
/// with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<T: Scalar>(
    f: &mut dyn FnMut(&[Tensor<T>]) -> Result<T, TensorError>,
    params: &[Tensor<T>],
    analytic: &[Tensor<T>],
    h: f64,
) -> Result<f64, TensorError> {
    if h <= 0.0 {
        return Err(TensorError::Contract("finite difference step must be > 0".into()));
    }
    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<T>> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for ci in 0..param.numel() {
            let orig = param.data()[ci];
            probe[pi].data_mut()[ci] = orig + T::of(h);
            let plus = f(&probe)?;
            probe[pi].data_mut()[ci] = orig - T::of(h);
            let minus = f(&probe)?;
            probe[pi].data_mut()[ci] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(TensorError::NonFinite("finite-difference probe".into()));
            }
            let numeric = (plus.widen() - minus.widen()) / (2.0 * h);
            let exact = analytic[pi].data()[ci].widen();
            let denom = exact.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((exact - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// Result of checking one op.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub op: &'static str,
    pub cases: usize,
    pub max_rel_err: f64,
}

/// Full-suite report.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub checks: Vec<OpCheck>,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.max_rel_err <= self.tolerance)
    }

    pub fn worst(&self) -> &OpCheck {
        self.checks
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .expect("suite is non-empty")
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Random tensor with entries kept away from zero (for kinked ops like relu).
fn rand_tensor_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        shape.to_vec(),
        (0..n)
            .map(|_| {
                let v: f64 = rng.gen_range(0.05..1.0);
                if rng.gen::<bool>() {
                    v
                } else {
                    -v
                }
            })
            .collect(),
    )
    .unwrap()
}

/// Loss builders take the current parameter values and return a scalar loss;
/// the weight tensor makes upstream gradients non-uniform.
type LossBuilder = dyn FnMut(&[Tensor<f64>]) -> Result<f64, TensorError>;

fn check_against_fd(
    build: &mut dyn FnMut(
        &mut Graph<f64>,
        &[Tensor<f64>],
    ) -> Result<(NodeId, Vec<NodeId>), TensorError>,
    params: &[Tensor<f64>],
    corrupt: bool,
) -> Result<f64, TensorError> {
    // Analytic pass.
    let mut graph = Graph::new();
    let (loss, param_nodes) = build(&mut graph, params)?;
    let grads = graph.backward(loss)?;
    let mut analytic: Vec<Tensor<f64>> =
        param_nodes.iter().map(|&id| graph.grad_of(&grads, id)).collect();
    if corrupt {
        // Negative-control hook: nudge one analytic component well past
        // tolerance so the suite must flag this op.
        if let Some(first) = analytic.first_mut() {
            let v = first.data()[0];
            first.data_mut()[0] = v + 0.5 * v.abs().max(1.0);
        }
    }
    let mut f: Box<LossBuilder> = Box::new(move |vals: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let (l, _) = build(&mut g, vals)?;
        Ok(g.value(l).scalar_value())
    });
    finite_diff_check(f.as_mut(), params, &analytic, DEFAULT_H)
}

/// Weighted sum of a node's elements; random weights give non-trivial
/// upstream gradients for every element.
fn weighted_sum(
    g: &mut Graph<f64>,
    node: NodeId,
    weights: &Tensor<f64>,
) -> Result<NodeId, TensorError> {
    let w = g.input(weights.clone());
    let prod = g.mul(node, w)?;
    Ok(g.sum(prod))
}

struct Suite {
    rng: ChaCha8Rng,
    cases: usize,
    corrupt: Option<String>,
    checks: Vec<OpCheck>,
}

impl Suite {
    fn run_op(
        &mut self,
        op: &'static str,
        case: &mut dyn FnMut(&mut ChaCha8Rng, bool) -> Result<f64, TensorError>,
    ) {
        let corrupt = self.corrupt.as_deref() == Some(op);
        let mut worst = 0.0f64;
        for _ in 0..self.cases {
            let err = case(&mut self.rng, corrupt).expect("gradcheck case must evaluate");
            worst = worst.max(err);
        }
        self.checks.push(OpCheck { op, cases: self.cases, max_rel_err: worst });
    }
}

/// Run the 64-bit finite-difference suite over all registered ops and the
/// composite two-block local loss. `corrupt` names an op whose analytic
/// gradient is deliberately damaged (negative control).
pub fn run_suite(seed: u64, cases_per_op: usize, corrupt: Option<&str>) -> SuiteReport {
    let mut suite = Suite {
        rng: rng_from(mix(seed, 0x47_52_41_44)),
        cases: cases_per_op,
        corrupt: corrupt.map(str::to_string),
        checks: Vec::new(),
    };

    suite.run_op("matmul", &mut |rng, corrupt| {
        let a = rand_tensor(rng, &[3, 4]);
        let b = rand_tensor(rng, &[4, 2]);
        let w = rand_tensor(rng, &[3, 2]);
        check_against_fd(
            &mut |g, vals| {
                let an = g.param(vals[0].clone());
                let bn = g.param(vals[1].clone());
                let c = g.matmul(an, bn)?;
                Ok((weighted_sum(g, c, &w)?, vec![an, bn]))
            },
            &[a, b],
            corrupt,
        )
    });

    suite.run_op("add", &mut |rng, corrupt| {
        let a = rand_tensor(rng, &[2, 3]);
        let b = rand_tensor(rng, &[2, 3]);
        let w = rand_tensor(rng, &[2, 3]);
        check_against_fd(
            &mut |g, vals| {
                let an = g.param(vals[0].clone());
                let bn = g.param(vals[1].clone());
                let c = g.add(an, bn)?;
                Ok((weighted_sum(g, c, &w)?, vec![an, bn]))
            },
            &[a, b],
            corrupt,
        )
    });

    suite.run_op("sub", &mut |rng, corrupt| {
        let a = rand_tensor(rng, &[2, 3]);
        let b = rand_tensor(rng, &[2, 3]);
        let w = rand_tensor(rng, &[2, 3]);
        check_against_fd(
            &mut |g, vals| {
                let an = g.param(vals[0].clone());
                let bn = g.param(vals[1].clone());
                let c = g.sub(an, bn)?;
                Ok((weighted_sum(g, c, &w)?, vec![an, bn]))
            },
            &[a, b],
            corrupt,
        )
    });

    suite.run_op("mul", &mut |rng, corrupt| {
        let a = rand_tensor(rng, &[2, 3]);
        let b = rand_tensor(rng, &[2, 3]);
        let w = rand_tensor(rng, &[2, 3]);
        check_against_fd(
            &mut |g, vals| {
                let an = g.param(vals[0].clone());
                let bn = g.param(vals[1].clone());
                let c = g.mul(an, bn)?;
                Ok((weighted_sum(g, c, &w)?, vec![an, bn]))
            },
            &[a, b],
            corrupt,
        )
    });

    suite.run_op("scale", &mut |rng, corrupt| {
        let a = rand_tensor(rng, &[4]);
        let c: f64 = rng.gen_range(-2.0..2.0);
        let w = rand_tensor(rng, &[4]);
        check_against_fd(
            &mut |g, vals| {
                let an = g.param(vals[0].clone());
                let s = g.scale(an, c);
                Ok((weighted_sum(g, s, &w)?, vec![an]))
            },
            &[a],
            corrupt,
        )
    });

    suite.run_op("add_row_bias", &mut |rng, corrupt| {
        let a = rand_tensor(rng, &[3, 4]);
        let b = rand_tensor(rng, &[4]);
        let w = rand_tensor(rng, &[3, 4]);
        check_against_fd(
            &mut |g, vals| {
                let an = g.param(vals[0].clone());
                let bn = g.param(vals[1].clone());
                let c = g.add_row_bias(an, bn)?;
                Ok((weighted_sum(g, c, &w)?, vec![an, bn]))
            },
            &[a, b],
            corrupt,
        )
    });

    suite.run_op("relu", &mut |rng, corrupt| {
        // Inputs kept away from the kink at zero.
        let a = rand_tensor_off_zero(rng, &[3, 3]);
        let w = rand_tensor(rng, &[3, 3]);
        check_against_fd(
            &mut |g, vals| {
                let an = g.param(vals[0].clone());
                let r = g.relu(an);
                Ok((weighted_sum(g, r, &w)?, vec![an]))
            },
            &[a],
            corrupt,
        )
    });

    suite.run_op("gelu", &mut |rng, corrupt| {
        let a = rand_tensor(rng, &[6]);
        let w = rand_tensor(rng, &[6]);
        check_against_fd(
            &mut |g, vals| {
                let an = g.param(vals[0].clone());
                let r = g.gelu(an);
                Ok((weighted_sum(g, r, &w)?, vec![an]))
            },
            &[a],
            corrupt,
        )
    });

    suite.run_op("l2_normalize", &mut |rng, corrupt| {
        // Rows with norms comfortably above eps.
        let a = rand_tensor_off_zero(rng, &[4, 8]);
        let w = rand_tensor(rng, &[4, 8]);
        check_against_fd(
            &mut |g, vals| {
                let an = g.param(vals[0].clone());
                let r = g.l2_normalize(an, 1e-12)?;
                Ok((weighted_sum(g, r, &w)?, vec![an]))
            },
            &[a],
            corrupt,
        )
    });

    suite.run_op("batch_norm_train", &mut |rng, corrupt| {
        let x = rand_tensor(rng, &[8, 4]);
        let gamma = rand_tensor_off_zero(rng, &[4]);
        let beta = rand_tensor(rng, &[4]);
        let w = rand_tensor(rng, &[8, 4]);
        check_against_fd(
            &mut |g, vals| {
                let xn = g.param(vals[0].clone());
                let gn = g.param(vals[1].clone());
                let bn = g.param(vals[2].clone());
                let (y, _, _) = g.batch_norm_train(xn, gn, bn, 1e-5)?;
                Ok((weighted_sum(g, y, &w)?, vec![xn, gn, bn]))
            },
            &[x, gamma, beta],
            corrupt,
        )
    });

    suite.run_op("batch_norm_eval", &mut |rng, corrupt| {
        let x = rand_tensor(rng, &[5, 4]);
        let gamma = rand_tensor_off_zero(rng, &[4]);
        let beta = rand_tensor(rng, &[4]);
        let rm = rand_tensor(rng, &[4]);
        let rv = rand_tensor(rng, &[4]).map(|v| v.abs() + 0.5);
        let w = rand_tensor(rng, &[5, 4]);
        check_against_fd(
            &mut |g, vals| {
                let xn = g.param(vals[0].clone());
                let gn = g.param(vals[1].clone());
                let bn = g.param(vals[2].clone());
                let y = g.batch_norm_eval(xn, gn, bn, &rm, &rv, 1e-5)?;
                Ok((weighted_sum(g, y, &w)?, vec![xn, gn, bn]))
            },
            &[x, gamma, beta],
            corrupt,
        )
    });

    suite.run_op("sum", &mut |rng, corrupt| {
        let a = rand_tensor(rng, &[2, 5]);
        check_against_fd(
            &mut |g, vals| {
                let an = g.param(vals[0].clone());
                Ok((g.sum(an), vec![an]))
            },
            &[a],
            corrupt,
        )
    });

    suite.run_op("infonce", &mut |rng, corrupt| {
        let b = rng.gen_range(2..=6);
        let d = rng.gen_range(2..=4);
        let q = rand_tensor(rng, &[b, d]);
        let k = rand_tensor(rng, &[b, d]);
        check_against_fd(
            &mut |g, vals| {
                let qn = g.param(vals[0].clone());
                let kn = g.input(k.clone());
                Ok((g.infonce(qn, kn, 0.2)?, vec![qn]))
            },
            &[q],
            corrupt,
        )
    });

    suite.run_op("cross_entropy", &mut |rng, corrupt| {
        let b = rng.gen_range(2..=6);
        let c = rng.gen_range(2..=5);
        let logits = rand_tensor(rng, &[b, c]);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
        check_against_fd(
            &mut |g, vals| {
                let ln = g.param(vals[0].clone());
                Ok((g.cross_entropy(ln, &labels)?, vec![ln]))
            },
            &[logits],
            corrupt,
        )
    });

    suite.run_op("alignment_loss", &mut |rng, corrupt| {
        // Symmetric alignment term; gradients flow to local z only.
        let b = rng.gen_range(2..=5);
        let d = rng.gen_range(2..=4);
        let z1 = rand_tensor_off_zero(rng, &[b, d]);
        let z2 = rand_tensor_off_zero(rng, &[b, d]);
        let g1 = rand_tensor_off_zero(rng, &[b, d]);
        let g2 = rand_tensor_off_zero(rng, &[b, d]);
        check_against_fd(
            &mut |g, vals| {
                let z1n = g.param(vals[0].clone());
                let z2n = g.param(vals[1].clone());
                let g1n = g.input(g1.clone());
                let g2n = g.input(g2.clone());
                let z1u = g.l2_normalize(z1n, 1e-12)?;
                let z2u = g.l2_normalize(z2n, 1e-12)?;
                let g1u = g.l2_normalize(g1n, 1e-12)?;
                let g2u = g.l2_normalize(g2n, 1e-12)?;
                let a1 = g.infonce(z1u, g2u, 0.2)?;
                let a2 = g.infonce(z2u, g1u, 0.2)?;
                let loss = g.add(a1, a2)?;
                Ok((loss, vec![z1n, z2n]))
            },
            &[z1, z2],
            corrupt,
        )
    });

    // Composite: the full local loss (contrastive + weighted alignment) on a
    // two-block model, finite-differenced through every trainable parameter.
    let composite_cases = (cases_per_op / 10).max(3);
    let corrupt_composite = suite.corrupt.as_deref() == Some("local_loss_composite");
    let mut worst = 0.0f64;
    for case in 0..composite_cases {
        let err = composite_case(mix(seed, 0xC0_4D50 + case as u64), corrupt_composite);
        worst = worst.max(err);
    }
    suite.checks.push(OpCheck {
        op: "local_loss_composite",
        cases: composite_cases,
        max_rel_err: worst,
    });

    SuiteReport { checks: suite.checks, tolerance: TOLERANCE }
}

fn composite_case(seed: u64, corrupt: bool) -> f64 {
    let spec = ModelSpec {
        input_dim: 5,
        num_layers: 2,
        block_hidden_dim: 6,
        block_out_dim: 5,
        proj_hidden: 6,
        proj_out: 3,
        pred_hidden: 6,
    };
    let mut model: ModelState<f64> = build_model(&spec, mix(seed, 1));
    model.frozen_prefix = 1;
    let global: ModelState<f64> = build_model(&spec, mix(seed, 2));
    let momentum = MomentumBranch::from_model(&build_model(&spec, mix(seed, 3)));
    let cfg = SslConfig {
        temperature: 0.2,
        momentum: 0.99,
        align_weight: 0.01,
        local_epochs: 1,
        batch_size: 4,
        normalize_alignment: true,
    };
    let mut rng = rng_from(mix(seed, 4));
    let x1 = rand_tensor(&mut rng, &[4, 5]);
    let x2 = rand_tensor(&mut rng, &[4, 5]);

    // Analytic gradients of every trainable parameter.
    let mut graph = Graph::new();
    let bl = build_batch_loss(&mut graph, &model, &momentum, Some(&global), &x1, &x2, &cfg)
        .expect("loss builds");
    let grads = graph.backward(bl.loss).expect("backward");
    let names: Vec<String> = bl.trainable.keys().cloned().collect();
    let mut analytic: Vec<Tensor<f64>> =
        names.iter().map(|n| graph.grad_of(&grads, bl.trainable[n])).collect();
    if corrupt {
        let v = analytic[0].data()[0];
        analytic[0].data_mut()[0] = v + 0.5 * v.abs().max(1.0);
    }
    let params: Vec<Tensor<f64>> = {
        let mut by_name = std::collections::BTreeMap::new();
        model.visit(&mut |name, t, _| {
            by_name.insert(name, t.clone());
        });
        names.iter().map(|n| by_name[n].clone()).collect()
    };

    let mut f = |vals: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut m = model.clone();
        let map: std::collections::BTreeMap<String, Tensor<f64>> =
            names.iter().cloned().zip(vals.iter().cloned()).collect();
        m.set_tensors(&map)?;
        let mut g = Graph::new();
        let bl = build_batch_loss(&mut g, &m, &momentum, Some(&global), &x1, &x2, &cfg)?;
        Ok(g.value(bl.loss).scalar_value())
    };
    finite_diff_check(&mut f, &params, &analytic, DEFAULT_H).expect("finite differences")
}
