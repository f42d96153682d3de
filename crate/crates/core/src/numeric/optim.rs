//! AdamW with decoupled weight decay.
//!
//! Per parameter `p` with gradient `g` at step `t`:
//!
//! ```text
//! p ← p · (1 − lr · wd)
//! m ← β1 m + (1 − β1) g
//! v ← β2 v + (1 − β2) g²
//! p ← p − lr · (m / (1 − β1^t)) / (sqrt(v / (1 − β2^t)) + ε)
//! ```

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::params::Parameterized;
use super::tensor::ParamId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig {
            lr,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state. Moment buffers are keyed by parameter name.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
    tracked: BTreeSet<ParamId>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: BTreeMap::new(),
            tracked: BTreeSet::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Whether the tensor with this id has ever been updated by this optimizer.
    pub fn tracks(&self, id: ParamId) -> bool {
        self.tracked.contains(&id)
    }

    pub fn tracked_ids(&self) -> impl Iterator<Item = &ParamId> {
        self.tracked.iter()
    }

    /// Applies one update to every trainable parameter of `modules`, using
    /// the gradients stored on the tensors. Modules must use distinct prefixes.
    pub fn step(&mut self, modules: &mut [(&str, &mut dyn Parameterized)]) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let cfg = self.config;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let mut err = None;
        for (prefix, module) in modules.iter_mut() {
            module.visit_mut(prefix, &mut |name, tensor| {
                if err.is_some() || !tensor.requires_grad() {
                    return;
                }
                let id = tensor.id();
                let (data, grad) = tensor.data_and_grad_mut();
                let Some(grad) = grad else { return };
                if grad.len() != data.len() {
                    err = Some(Error::ShapeMismatch {
                        op: "adamw",
                        left: vec![data.len()],
                        right: vec![grad.len()],
                    });
                    return;
                }
                let mom = self.moments.entry(name).or_insert_with(|| Moments {
                    m: vec![0.0; data.len()],
                    v: vec![0.0; data.len()],
                });
                if mom.m.len() != data.len() {
                    err = Some(Error::ShapeMismatch {
                        op: "adamw",
                        left: vec![mom.m.len()],
                        right: vec![data.len()],
                    });
                    return;
                }
                self.tracked.insert(id);
                let decay = 1.0 - cfg.lr * cfg.weight_decay;
                for i in 0..data.len() {
                    let g = grad[i];
                    mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * g;
                    mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * g * g;
                    let m_hat = mom.m[i] / bc1;
                    let v_hat = mom.v[i] / bc2;
                    data[i] = data[i] * decay - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
                }
            });
        }
        err.map_or(Ok(()), Err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    struct One(Tensor);

    impl Parameterized for One {
        fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
            f(crate::numeric::params::join(prefix, "w"), &self.0);
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
            f(crate::numeric::params::join(prefix, "w"), &mut self.0);
        }
    }

    fn with_grad(value: f64, grad: f64) -> One {
        let mut t = Tensor::vector(vec![value]).trainable();
        t.grad_mut().unwrap()[0] = grad;
        One(t)
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = with_grad(0.7, 0.0);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::with_lr(0.1)
        });
        opt.step(&mut [("", &mut p)]).unwrap();
        assert_eq!(p.0.data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = with_grad(0.0, 1.0);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::with_lr(0.1)
        });
        opt.step(&mut [("", &mut p)]).unwrap();
        // m̂ = 1, sqrt(v̂) = 1
        assert!((p.0.data()[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn decoupled_decay_shrinks() {
        let mut p = with_grad(2.0, 0.0);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.5,
            ..AdamWConfig::with_lr(0.1)
        });
        opt.step(&mut [("", &mut p)]).unwrap();
        assert!((p.0.data()[0] - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn shape_change_is_rejected() {
        let mut p = with_grad(1.0, 1.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut [("", &mut p)]).unwrap();
        let mut q = One(Tensor::vector(vec![1.0, 2.0]).trainable());
        assert!(opt.step(&mut [("", &mut q)]).is_err());
    }

    #[test]
    fn frozen_tensors_untouched_and_untracked() {
        let mut p = One(Tensor::vector(vec![1.0]));
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut [("", &mut p)]).unwrap();
        assert_eq!(p.0.data(), &[1.0]);
        assert!(!opt.tracks(p.0.id()));
    }
}
