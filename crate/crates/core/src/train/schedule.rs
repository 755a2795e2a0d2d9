pub const PLATEAU_PATIENCE: usize = 10;
pub const PLATEAU_FACTOR: f64 = 0.1;
/// A loss must beat the best by more than this to count as an improvement.
pub const PLATEAU_MIN_DELTA: f64 = 1e-6;

/// Reduce-on-plateau state driven by the epoch training loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleState {
    pub lr: f64,
    pub best_loss: f64,
    pub epochs_since_improvement: usize,
    pub patience: usize,
    pub factor: f64,
}

impl ScheduleState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            best_loss: f64::INFINITY,
            epochs_since_improvement: 0,
            patience: PLATEAU_PATIENCE,
            factor: PLATEAU_FACTOR,
        }
    }

    /// Records one epoch loss; returns `true` when the rate was cut.
    pub fn update(&mut self, loss: f64) -> bool {
        if loss < self.best_loss - PLATEAU_MIN_DELTA {
            self.best_loss = loss;
            self.epochs_since_improvement = 0;
            return false;
        }
        self.epochs_since_improvement += 1;
        if self.epochs_since_improvement >= self.patience {
            // Dividing by the reciprocal keeps decimal rates exact: 0.001 → 0.0001.
            self.lr /= self.factor.recip();
            self.epochs_since_improvement = 0;
            return true;
        }
        false
    }
}

pub fn plateau_update(state: &ScheduleState, epoch_train_loss: f64) -> ScheduleState {
    let mut next = state.clone();
    next.update(epoch_train_loss);
    next
}
