//! Pieces shared by the two training stages.

use thiserror::Error;

use crate::numeric::NumericError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("training diverged at epoch {epoch}, step {step} ({stage}): loss {loss}; {detail}")]
    Diverged {
        stage: &'static str,
        epoch: usize,
        step: usize,
        loss: f64,
        detail: String,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Patience-based early stopping on a metric where larger is better.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    stale: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Progress {
    Improved,
    Stale,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> Progress {
        if value > self.best {
            self.best = value;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            Progress::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                Progress::Stop
            } else {
                Progress::Stale
            }
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.map(|e| (e, self.best))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stops_after_patience_stale_epochs() {
        let mut es = EarlyStopping::new(2);
        assert_eq!(es.observe(0, 0.1), Progress::Improved);
        assert_eq!(es.observe(1, 0.3), Progress::Improved);
        assert_eq!(es.observe(2, 0.3), Progress::Stale);
        assert_eq!(es.observe(3, 0.2), Progress::Stop);
        assert_eq!(es.best(), Some((1, 0.3)));
    }
}
