use super::TrainConfig;

/// What to do after an epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochDecision {
    /// New best validation loss; snapshot the weights.
    pub improved: bool,
    pub stop: bool,
    /// Learning rate for the next epoch.
    pub lr: f64,
}

/// Early stopping and plateau learning-rate reduction on the validation loss.
///
/// Both watch the same signal with the same improvement threshold but keep
/// independent wait counters; the plateau counter restarts after each
/// reduction.
#[derive(Clone, Debug)]
pub struct Monitor {
    min_delta: f64,
    stop_patience: usize,
    plateau_patience: usize,
    factor: f64,
    min_lr: f64,
    lr: f64,
    best: f64,
    best_epoch: usize,
    stop_wait: usize,
    plateau_wait: usize,
}

impl Monitor {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            min_delta: config.early_stop.min_delta,
            stop_patience: config.early_stop.patience,
            plateau_patience: config.plateau.patience,
            factor: config.plateau.factor,
            min_lr: config.plateau.min_lr,
            lr: config.adam.lr,
            best: f64::INFINITY,
            best_epoch: 0,
            stop_wait: 0,
            plateau_wait: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn on_epoch_end(&mut self, epoch: usize, val_loss: f64) -> EpochDecision {
        let improved = val_loss < self.best - self.min_delta;
        if improved {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.stop_wait = 0;
            self.plateau_wait = 0;
        } else {
            self.stop_wait += 1;
            self.plateau_wait += 1;
            if self.plateau_wait >= self.plateau_patience {
                if self.lr > self.min_lr {
                    self.lr = (self.lr * self.factor).max(self.min_lr);
                }
                self.plateau_wait = 0;
            }
        }
        EpochDecision {
            improved,
            stop: self.stop_wait >= self.stop_patience,
            lr: self.lr,
        }
    }
}
