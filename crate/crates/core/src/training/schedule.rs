use serde::{Deserialize, Serialize};

/// Quantity watched for the learning-rate drop and the best checkpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatienceMetric {
    ValLoss,
    #[default]
    TokenAccuracy,
}

impl PatienceMetric {
    pub fn higher_is_better(self) -> bool {
        matches!(self, PatienceMetric::TokenAccuracy)
    }
}

/// Two-phase learning rate: `initial` until the watched metric fails to
/// improve for `patience` consecutive epochs, then `dropped` for good.
#[derive(Clone, Debug)]
pub struct PlateauSchedule {
    initial: f64,
    dropped: f64,
    patience: usize,
    higher_is_better: bool,
    best: Option<f64>,
    stagnant: usize,
    drop_epoch: Option<usize>,
    epochs_seen: usize,
}

impl PlateauSchedule {
    pub fn new(initial: f64, dropped: f64, patience: usize, metric: PatienceMetric) -> Self {
        PlateauSchedule {
            initial,
            dropped,
            patience,
            higher_is_better: metric.higher_is_better(),
            best: None,
            stagnant: 0,
            drop_epoch: None,
            epochs_seen: 0,
        }
    }

    /// Learning rate for the next epoch.
    pub fn lr(&self) -> f64 {
        if self.drop_epoch.is_some() {
            self.dropped
        } else {
            self.initial
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Epochs since the last improvement.
    pub fn stagnant_epochs(&self) -> usize {
        self.stagnant
    }

    /// Epoch after which the drop happened, if it has.
    pub fn drop_epoch(&self) -> Option<usize> {
        self.drop_epoch
    }

    /// Records the metric at the end of an epoch. Returns whether it is a
    /// new best.
    pub fn observe(&mut self, metric: f64) -> bool {
        self.epochs_seen += 1;
        let improved = match self.best {
            None => !metric.is_nan(),
            Some(b) if self.higher_is_better => metric > b,
            Some(b) => metric < b,
        };
        if improved {
            self.best = Some(metric);
            self.stagnant = 0;
        } else {
            self.stagnant += 1;
            if self.stagnant >= self.patience && self.drop_epoch.is_none() {
                self.drop_epoch = Some(self.epochs_seen);
            }
        }
        improved
    }
}
