//! Per-epoch learning-rate schedules sweeping between the configured bounds.

use serde::{Deserialize, Serialize};

use super::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    /// `lr_max · decay^epoch`, never below `lr_min · 1e-3`.
    Exponential,
    /// Starts at `lr_max`, multiplies by a factor whenever the training loss stalls.
    ReduceOnPlateau,
    /// One half-cosine from `lr_max` down to `lr_min` over the epoch budget.
    #[default]
    CosineAnnealing,
    /// Half-cosines of fixed period, each restarting at `lr_max`.
    CosineAnnealingRestarts,
}

/// Ratio between `lr_min` and the exponential schedule's floor.
pub const EXPONENTIAL_FLOOR_RATIO: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct LrSchedule {
    kind: SchedulerKind,
    lr_min: f64,
    lr_max: f64,
    epochs: usize,
    decay: f64,
    plateau_factor: f64,
    plateau_patience: usize,
    period: usize,
    epoch: usize,
    plateau_lr: f64,
    best_loss: f64,
    stale: usize,
}

impl LrSchedule {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            kind: cfg.scheduler,
            lr_min: cfg.lr_min,
            lr_max: cfg.lr_max,
            epochs: cfg.epochs,
            decay: cfg.exp_decay,
            plateau_factor: cfg.plateau_factor,
            plateau_patience: cfg.plateau_patience,
            period: cfg.restart_period.max(1),
            epoch: 0,
            plateau_lr: cfg.lr_max,
            best_loss: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Learning rate for the current epoch.
    pub fn lr(&self) -> f64 {
        let span = self.lr_max - self.lr_min;
        let half_cosine = |t: f64| self.lr_max - 0.5 * span * (1.0 - (std::f64::consts::PI * t).cos());
        match self.kind {
            SchedulerKind::Exponential => {
                let floor = self.lr_min * EXPONENTIAL_FLOOR_RATIO;
                (self.lr_max * self.decay.powi(self.epoch.min(i32::MAX as usize) as i32)).clamp(floor, self.lr_max)
            }
            SchedulerKind::ReduceOnPlateau => self.plateau_lr,
            SchedulerKind::CosineAnnealing => {
                let last = self.epochs.saturating_sub(1).max(1) as f64;
                half_cosine((self.epoch as f64 / last).min(1.0)).clamp(self.lr_min, self.lr_max)
            }
            SchedulerKind::CosineAnnealingRestarts => {
                let t = (self.epoch % self.period) as f64 / self.period as f64;
                half_cosine(t).clamp(self.lr_min, self.lr_max)
            }
        }
    }

    /// Closes the current epoch; only the plateau schedule looks at the loss.
    pub fn end_epoch(&mut self, train_loss: f64) {
        if self.kind == SchedulerKind::ReduceOnPlateau {
            if train_loss < self.best_loss {
                self.best_loss = train_loss;
                self.stale = 0;
            } else {
                self.stale += 1;
                if self.stale > self.plateau_patience {
                    self.plateau_lr = (self.plateau_lr * self.plateau_factor).max(self.lr_min);
                    self.stale = 0;
                }
            }
        }
        self.epoch += 1;
    }
}
