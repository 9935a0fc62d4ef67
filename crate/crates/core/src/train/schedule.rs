use serde::{Deserialize, Serialize};

/// Reduce-on-plateau learning-rate schedule driven by validation loss.
///
/// The first observed metric only establishes the baseline; the trainer
/// feeds it the validation loss of the untrained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub floor: f64,
    /// Minimum absolute decrease that counts as an improvement.
    pub threshold: f64,
    best: f64,
    wait: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64) -> Self {
        Self { lr, factor: 0.2, patience: 4, floor: 1e-6, threshold: 1e-4, best: f64::INFINITY, wait: 0 }
    }

    pub fn with_params(lr: f64, factor: f64, patience: usize, floor: f64) -> Self {
        Self { factor, patience, floor, ..Self::new(lr) }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Records one epoch's metric and returns the learning rate to use next.
    pub fn observe(&mut self, metric: f64) -> f64 {
        if metric < self.best - self.threshold {
            self.best = metric;
            self.wait = 0;
        } else {
            self.wait += 1;
            if self.wait >= self.patience {
                self.lr = (self.lr * self.factor).max(self.floor).min(self.lr);
                self.wait = 0;
            }
        }
        self.lr
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop { best_epoch: usize },
}

/// Early stopping on validation loss with a hard epoch cap. Epochs are
/// numbered from 1.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub max_epochs: usize,
    best: f64,
    best_epoch: usize,
    wait: usize,
    epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, max_epochs: usize) -> Self {
        Self { patience, max_epochs, best: f64::INFINITY, best_epoch: 0, wait: 0, epoch: 0 }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    /// True when the latest observation was a new best.
    pub fn improved(&self) -> bool {
        self.best_epoch == self.epoch && self.epoch > 0
    }

    pub fn observe(&mut self, val_loss: f64) -> StopDecision {
        self.epoch += 1;
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = self.epoch;
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        if self.wait >= self.patience || self.epoch >= self.max_epochs {
            StopDecision::Stop { best_epoch: self.best_epoch }
        } else {
            StopDecision::Continue
        }
    }
}

/// Replays a loss history and reports the decision after its last epoch.
pub fn early_stopping(history: &[f64], patience: usize, max_epochs: usize) -> StopDecision {
    let mut es = EarlyStopping::new(patience, max_epochs);
    let mut decision = StopDecision::Continue;
    for &loss in history {
        decision = es.observe(loss);
        if decision != StopDecision::Continue {
            break;
        }
    }
    decision
}
