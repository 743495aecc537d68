//! Optimizers and the step learning-rate schedule.
//!
//! The update formulas here are normative for the crate: tests pin them
//! against hand evaluation and an independently coded reference.

use serde::{Deserialize, Serialize};

use crate::model::{BoundParams, NetworkParams};
use crate::tensor::Gradients;
use crate::Real;

/// Step decay: multiply the base rate by `factor` every `drop_every` epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    #[serde(default = "default_drop_every")]
    pub drop_every: u32,
    #[serde(default = "default_factor")]
    pub factor: Real,
}

fn default_drop_every() -> u32 {
    60
}

fn default_factor() -> Real {
    0.1
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            drop_every: 60,
            factor: 0.1,
        }
    }
}

/// Learning rate in effect during `epoch` (0-based).
pub fn lr_at(schedule: &Schedule, base_lr: Real, epoch: u32) -> Real {
    if schedule.drop_every == 0 {
        return base_lr;
    }
    base_lr * schedule.factor.powi((epoch / schedule.drop_every) as i32)
}

/// SGD with Nesterov momentum: `v <- mu*v + g`, `theta <- theta - lr*(g + mu*v)`.
pub fn sgd_nesterov_step(
    theta: &mut [Real],
    grad: &[Real],
    velocity: &mut [Real],
    lr: Real,
    momentum: Real,
) {
    debug_assert_eq!(theta.len(), grad.len());
    debug_assert_eq!(theta.len(), velocity.len());
    for ((t, &g), v) in theta.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *t -= lr * (g + momentum * *v);
    }
}

/// Bias-corrected Adam. `t` is the 1-based step count including this step.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    theta: &mut [Real],
    grad: &[Real],
    m: &mut [Real],
    v: &mut [Real],
    t: u64,
    lr: Real,
    beta1: Real,
    beta2: Real,
    eps: Real,
) {
    debug_assert_eq!(theta.len(), grad.len());
    debug_assert!(t >= 1);
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    for (((th, &g), mi), vi) in theta.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *mi = beta1 * *mi + (1.0 - beta1) * g;
        *vi = beta2 * *vi + (1.0 - beta2) * g * g;
        let m_hat = *mi / c1;
        let v_hat = *vi / c2;
        *th -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Which update rule a member uses, with its hyperparameters.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdNesterov { momentum: Real },
    Adam { beta1: Real, beta2: Real, eps: Real },
}

/// Optimizer settings shared by every cohort member.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(flatten)]
    pub kind: OptimizerKind,
    pub lr: Real,
    pub weight_decay: Real,
}

impl OptimizerConfig {
    /// SGD-Nesterov at lr 0.1, momentum 0.9: the supervised-training default.
    pub fn sgd_default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::SgdNesterov { momentum: 0.9 },
            lr: 0.1,
            weight_decay: 0.0,
        }
    }

    /// Adam at lr 2e-4, betas (0.5, 0.999), eps 1e-8.
    pub fn adam_default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam {
                beta1: 0.5,
                beta2: 0.999,
                eps: 1e-8,
            },
            lr: 2e-4,
            weight_decay: 0.0,
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::sgd_default()
    }
}

/// Gradients arranged like [`NetworkParams`]: per layer, weights then bias.
pub struct ParamGrads {
    pub layers: Vec<(Vec<Real>, Vec<Real>)>,
}

/// Pulls a member's gradients out of a backward pass.
pub fn extract_grads(grads: &Gradients, bound: &BoundParams) -> ParamGrads {
    ParamGrads {
        layers: bound
            .layers
            .iter()
            .map(|&(w, b)| {
                (
                    grads.expect(w).data().to_vec(),
                    grads.expect(b).data().to_vec(),
                )
            })
            .collect(),
    }
}

struct LayerBuf {
    w: Vec<Real>,
    b: Vec<Real>,
}

impl LayerBuf {
    fn zeros_like(params: &NetworkParams) -> Vec<LayerBuf> {
        params
            .layers
            .iter()
            .map(|l| LayerBuf {
                w: vec![0.0; l.weight.len()],
                b: vec![0.0; l.bias.len()],
            })
            .collect()
    }
}

enum Moments {
    Sgd { velocity: Vec<LayerBuf> },
    Adam { m: Vec<LayerBuf>, v: Vec<LayerBuf> },
}

/// Per-member optimizer state: moment buffers plus the step counter.
pub struct OptimizerState {
    cfg: OptimizerConfig,
    moments: Moments,
    t: u64,
}

impl OptimizerState {
    pub fn new(cfg: OptimizerConfig, params: &NetworkParams) -> Self {
        let moments = match cfg.kind {
            OptimizerKind::SgdNesterov { .. } => Moments::Sgd {
                velocity: LayerBuf::zeros_like(params),
            },
            OptimizerKind::Adam { .. } => Moments::Adam {
                m: LayerBuf::zeros_like(params),
                v: LayerBuf::zeros_like(params),
            },
        };
        OptimizerState {
            cfg,
            moments,
            t: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Steps taken so far.
    pub fn t(&self) -> u64 {
        self.t
    }

    /// Applies one update at learning rate `lr` (already scheduled).
    pub fn step(&mut self, params: &mut NetworkParams, grads: &ParamGrads, lr: Real) {
        assert_eq!(params.layers.len(), grads.layers.len());
        self.t += 1;
        let wd = self.cfg.weight_decay;
        for (li, layer) in params.layers.iter_mut().enumerate() {
            let (gw, gb) = (&grads.layers[li].0, &grads.layers[li].1);
            let (gw, gb) = if wd != 0.0 {
                (
                    layer
                        .weight
                        .iter()
                        .zip(gw)
                        .map(|(&p, &g)| g + wd * p)
                        .collect::<Vec<Real>>(),
                    layer
                        .bias
                        .iter()
                        .zip(gb)
                        .map(|(&p, &g)| g + wd * p)
                        .collect::<Vec<Real>>(),
                )
            } else {
                (gw.clone(), gb.clone())
            };
            match (&mut self.moments, self.cfg.kind) {
                (Moments::Sgd { velocity }, OptimizerKind::SgdNesterov { momentum }) => {
                    sgd_nesterov_step(&mut layer.weight, &gw, &mut velocity[li].w, lr, momentum);
                    sgd_nesterov_step(&mut layer.bias, &gb, &mut velocity[li].b, lr, momentum);
                }
                (Moments::Adam { m, v }, OptimizerKind::Adam { beta1, beta2, eps }) => {
                    adam_step(
                        &mut layer.weight,
                        &gw,
                        &mut m[li].w,
                        &mut v[li].w,
                        self.t,
                        lr,
                        beta1,
                        beta2,
                        eps,
                    );
                    adam_step(
                        &mut layer.bias,
                        &gb,
                        &mut m[li].b,
                        &mut v[li].b,
                        self.t,
                        lr,
                        beta1,
                        beta2,
                        eps,
                    );
                }
                _ => unreachable!("moment buffers always match the optimizer kind"),
            }
        }
    }
}
