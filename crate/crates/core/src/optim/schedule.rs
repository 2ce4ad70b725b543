/// A loss counts as an improvement only if it beats the best by this much.
pub const IMPROVEMENT: f64 = 1e-4;

/// Halves the learning rate once the validation loss has failed to improve
/// for more than `patience` epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    best: f64,
    stagnant: usize,
}

impl Default for Plateau {
    fn default() -> Self {
        Plateau {
            factor: 0.5,
            patience: 3,
            min_lr: 1e-6,
            best: f64::INFINITY,
            stagnant: 0,
        }
    }
}

impl Plateau {
    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn stagnant(&self) -> usize {
        self.stagnant
    }

    /// Feeds one epoch's validation loss; returns the learning rate to use next.
    /// A rate already at or below `min_lr` is left alone.
    pub fn update(&mut self, val_loss: f64, lr: f64) -> f64 {
        if val_loss < self.best - IMPROVEMENT {
            self.best = val_loss;
            self.stagnant = 0;
            return lr;
        }
        self.stagnant += 1;
        if self.stagnant > self.patience && lr > self.min_lr {
            self.stagnant = 0;
            return (lr * self.factor).max(self.min_lr);
        }
        lr
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without improvement and keeps
/// a snapshot of the weights from the best epoch.
#[derive(Clone, Debug)]
pub struct EarlyStopping<W> {
    pub patience: usize,
    pub restore_best: bool,
    best: f64,
    best_epoch: usize,
    best_weights: Option<W>,
    stagnant: usize,
    epoch: usize,
}

impl<W: Clone> EarlyStopping<W> {
    pub fn new(patience: usize, restore_best: bool) -> Self {
        EarlyStopping {
            patience,
            restore_best,
            best: f64::INFINITY,
            best_epoch: 0,
            best_weights: None,
            stagnant: 0,
            epoch: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// 1-based epoch of the best loss, 0 before any update.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_weights(&self) -> Option<&W> {
        self.best_weights.as_ref()
    }

    pub fn update(&mut self, val_loss: f64, weights: &W) -> Decision {
        self.epoch += 1;
        if val_loss < self.best - IMPROVEMENT {
            self.best = val_loss;
            self.best_epoch = self.epoch;
            self.stagnant = 0;
            if self.restore_best {
                self.best_weights = Some(weights.clone());
            }
            return Decision::Continue;
        }
        self.stagnant += 1;
        if self.stagnant >= self.patience {
            Decision::Stop
        } else {
            Decision::Continue
        }
    }

    /// The snapshot to restore after a stop, if restoration is on.
    pub fn restore(&self) -> Option<&W> {
        if self.restore_best {
            self.best_weights.as_ref()
        } else {
            None
        }
    }
}

impl<W: Clone> Default for EarlyStopping<W> {
    fn default() -> Self {
        EarlyStopping::new(5, true)
    }
}
