use serde::{Deserialize, Serialize};

use super::{Tensor, TensorError};

/// SGD with classic (heavy-ball) momentum:
/// `v <- momentum * v + grad; param <- param - lr * v`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), TensorError> {
        if params.len() != grads.len() {
            return Err(TensorError::ParamCount {
                params: params.len(),
                grads: grads.len(),
            });
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| p.map(|_| 0.0)).collect();
        } else if self.velocity.len() != params.len() {
            return Err(TensorError::ParamCount {
                params: params.len(),
                grads: self.velocity.len(),
            });
        }
        for ((p, g), v) in params.iter().zip(grads).zip(&self.velocity) {
            if !p.same_shape(g) {
                return Err(TensorError::ShapeMismatch {
                    op: "sgd grad",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if !p.same_shape(v) {
                return Err(TensorError::ShapeMismatch {
                    op: "sgd velocity",
                    left: p.shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub cooldown: usize,
    /// Relative improvement required to reset the patience counter.
    pub threshold: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.5,
            patience: 100,
            cooldown: 80,
            threshold: 1e-4,
            min_lr: 0.0,
        }
    }
}

/// Halves (by `factor`) the learning rate once the monitored loss has failed
/// to improve for `patience` consecutive epochs, then ignores the loss for
/// `cooldown` epochs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlateauScheduler {
    config: PlateauConfig,
    best: f64,
    bad_epochs: usize,
    cooldown_left: usize,
    reductions: usize,
}

impl PlateauScheduler {
    pub fn new(config: PlateauConfig) -> Result<Self, TensorError> {
        if !(config.factor > 0.0 && config.factor < 1.0) {
            return Err(TensorError::Config(format!(
                "plateau factor must lie in (0, 1), got {}",
                config.factor
            )));
        }
        Ok(Self {
            config,
            best: f64::INFINITY,
            bad_epochs: 0,
            cooldown_left: 0,
            reductions: 0,
        })
    }

    pub fn config(&self) -> &PlateauConfig {
        &self.config
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn bad_epochs(&self) -> usize {
        self.bad_epochs
    }

    pub fn cooldown_left(&self) -> usize {
        self.cooldown_left
    }

    pub fn reductions(&self) -> usize {
        self.reductions
    }

    /// Feeds one epoch's loss; returns the (possibly reduced) learning rate.
    pub fn step(&mut self, epoch_loss: f64, lr: f64) -> Result<f64, TensorError> {
        if epoch_loss.is_nan() {
            return Err(TensorError::NotFinite("plateau loss"));
        }
        if epoch_loss < self.best * (1.0 - self.config.threshold) {
            self.best = epoch_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        if self.cooldown_left > 0 {
            self.cooldown_left -= 1;
            self.bad_epochs = 0;
        }
        if self.bad_epochs >= self.config.patience.max(1) {
            let reduced = (lr * self.config.factor).max(self.config.min_lr);
            self.cooldown_left = self.config.cooldown;
            self.bad_epochs = 0;
            if reduced < lr {
                self.reductions += 1;
            }
            return Ok(reduced);
        }
        Ok(lr)
    }
}
