//! SGD training of the multi-expert model on the composite objective,
//! with cosine learning-rate decay, per-epoch history, checkpoints and the
//! gradient checker.

mod config;
pub mod gradcheck;
mod history;
mod trainer;

use std::f64::consts::PI;

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::nn::{Param, Real};

pub use config::TrainingConfig;
pub use history::{EpochRecord, TrainingHistory, HISTORY_HEADER};
pub use trainer::{check_finite, train, train_on, train_step, TrainOutcome};

/// `lr_min + (lr0 - lr_min) * (1 + cos(pi t)) / 2` for `t` in `[0, 1]`.
pub fn cosine_lr(t: f64, lr0: f64, lr_min: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("schedule position must lie in [0, 1], got {t}")));
    }
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (PI * t).cos()))
}

/// Learning rate of 0-based `epoch` out of `epochs`: the first epoch uses
/// `lr0` and the last `lr_min`.
pub fn epoch_lr(epoch: usize, epochs: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    if epoch >= epochs {
        return Err(Error::invalid(format!("epoch {epoch} out of {epochs}")));
    }
    if epochs == 1 {
        return Ok(lr0);
    }
    if epoch == epochs - 1 {
        return Ok(lr_min);
    }
    cosine_lr(epoch as f64 / (epochs - 1) as f64, lr0, lr_min)
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v = mu v + g + wd w; w -= lr v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<ArrayD<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Updates `params` in place. They must come in the same order on every
    /// call.
    pub fn step(&mut self, params: Vec<&mut Param<T>>, lr: f64) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::invalid("optimizer saw a different parameter list"));
        }
        let (mu, wd, lr) = (
            <T as Real>::from_f64(self.momentum),
            <T as Real>::from_f64(self.weight_decay),
            <T as Real>::from_f64(lr),
        );
        for (p, v) in params.into_iter().zip(&mut self.velocity) {
            if v.shape() != p.value.shape() {
                return Err(Error::shape("optimizer state shape changed"));
            }
            ndarray::Zip::from(&mut p.value)
                .and(v)
                .and(&p.grad)
                .for_each(|w, v, &g| {
                    *v = mu * *v + g + wd * *w;
                    *w -= lr * *v;
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0.0, 0.1, 0.0001).unwrap(), 0.1);
        assert!((cosine_lr(1.0, 0.1, 0.0001).unwrap() - 0.0001).abs() < 1e-18);
        assert!((cosine_lr(0.5, 0.1, 0.0001).unwrap() - 0.05005).abs() < 1e-15);
        assert!(cosine_lr(1.5, 0.1, 0.0001).is_err());
        assert!(cosine_lr(-0.1, 0.1, 0.0001).is_err());
    }

    #[test]
    fn epoch_schedule_hits_both_ends() {
        assert_eq!(epoch_lr(0, 30, 0.1, 0.0001).unwrap(), 0.1);
        assert_eq!(epoch_lr(29, 30, 0.1, 0.0001).unwrap(), 0.0001);
        assert_eq!(epoch_lr(0, 1, 0.1, 0.0001).unwrap(), 0.1);
        let lrs: Vec<f64> = (0..30).map(|e| epoch_lr(e, 30, 0.1, 0.0001).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn sgd_matches_hand_update() {
        let mut p = Param::<f64>::filled(&[1], 1.0);
        p.grad.fill(0.5);
        let mut opt = Sgd::new(0.9, 0.1);
        opt.step(vec![&mut p], 0.1).unwrap();
        // v = 0.5 + 0.1 = 0.6; w = 1 - 0.06
        assert!((p.value[[0]] - 0.94).abs() < 1e-15);
        opt.step(vec![&mut p], 0.1).unwrap();
        // v = 0.54 + 0.5 + 0.094 = 1.134; w = 0.94 - 0.1134
        assert!((p.value[[0]] - (0.94 - 0.1134)).abs() < 1e-15);
    }
}
