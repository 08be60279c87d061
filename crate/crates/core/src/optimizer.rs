//! Shared training configuration plus SGD and bias-corrected Adam updates
//! over flat parameter tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl OptimizerKind {
    /// Adam with the standard moments (0.9, 0.999) and epsilon 1e-8.
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    fn validate(&self) -> Result<()> {
        if let OptimizerKind::Adam {
            beta1,
            beta2,
            epsilon,
        } = self
        {
            let ok = (0.0..1.0).contains(beta1) && (0.0..1.0).contains(beta2) && *epsilon > 0.0;
            if !ok {
                return Err(Error::Config(format!(
                    "Adam moments must lie in [0, 1) with positive epsilon, got \
                     beta1={beta1}, beta2={beta2}, epsilon={epsilon}"
                )));
            }
        }
        Ok(())
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::adam()
    }
}

/// Hyperparameters shared by every trainer in the crate.
///
/// `learning_rate = 0` is allowed and makes training a no-op that leaves
/// parameters at their initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 256,
            epochs: 350,
            seed: 0,
            optimizer: OptimizerKind::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        self.optimizer.validate()
    }

    /// Same hyperparameters under a different seed.
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.clone()
        }
    }
}

enum OptState<S> {
    Sgd,
    Adam {
        beta1: S,
        beta2: S,
        epsilon: S,
        step: i32,
        m: Vec<Vec<S>>,
        v: Vec<Vec<S>>,
    },
}

/// One optimizer instance driving a fixed family of parameter tensors.
/// Tensor count and sizes are fixed at construction; moment state is kept
/// per tensor element.
pub struct Optimizer<S> {
    lr: S,
    state: OptState<S>,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(cfg: &TrainConfig, tensor_sizes: &[usize]) -> Result<Self> {
        cfg.validate()?;
        let state = match cfg.optimizer {
            OptimizerKind::Sgd => OptState::Sgd,
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            } => OptState::Adam {
                beta1: S::cast(beta1),
                beta2: S::cast(beta2),
                epsilon: S::cast(epsilon),
                step: 0,
                m: tensor_sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
                v: tensor_sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            },
        };
        Ok(Optimizer {
            lr: S::cast(cfg.learning_rate),
            state,
        })
    }

    /// Apply one update. `params[i]` and `grads[i]` must have the size
    /// declared for tensor `i` at construction; mismatches panic.
    pub fn step(&mut self, params: &mut [&mut [S]], grads: &[&[S]]) {
        assert_eq!(params.len(), grads.len(), "tensor family size mismatch");
        match &mut self.state {
            OptState::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    assert_eq!(p.len(), g.len(), "tensor length mismatch");
                    for (pv, &gv) in p.iter_mut().zip(*g) {
                        *pv -= self.lr * gv;
                    }
                }
            }
            OptState::Adam {
                beta1,
                beta2,
                epsilon,
                step,
                m,
                v,
            } => {
                assert_eq!(params.len(), m.len(), "tensor family size mismatch");
                *step += 1;
                let bc1 = S::one() - beta1.powi(*step);
                let bc2 = S::one() - beta2.powi(*step);
                let one = S::one();
                for i in 0..params.len() {
                    let p = &mut *params[i];
                    let g = grads[i];
                    assert_eq!(p.len(), m[i].len(), "tensor length mismatch");
                    assert_eq!(p.len(), g.len(), "tensor length mismatch");
                    for j in 0..p.len() {
                        m[i][j] = *beta1 * m[i][j] + (one - *beta1) * g[j];
                        v[i][j] = *beta2 * v[i][j] + (one - *beta2) * g[j] * g[j];
                        let m_hat = m[i][j] / bc1;
                        let v_hat = v[i][j] / bc2;
                        p[j] -= self.lr * m_hat / (v_hat.sqrt() + *epsilon);
                    }
                }
            }
        }
    }
}
