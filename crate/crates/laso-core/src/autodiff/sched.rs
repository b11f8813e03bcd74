/// Reduce-on-plateau: cut the learning rate by `factor` after `patience`
/// consecutive epochs without an improvement strictly greater than
/// `min_improvement` over the best loss seen so far.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    min_improvement: f64,
    best: Option<f64>,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, min_improvement: f64) -> Self {
        assert!(
            factor > 0.0 && factor <= 1.0,
            "factor {factor} out of (0, 1]"
        );
        PlateauScheduler {
            lr,
            factor,
            patience,
            min_improvement,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Factor 0.3, patience 5, min improvement 1e-4.
    pub fn with_defaults(lr: f64) -> Self {
        Self::new(lr, 0.3, 5, 1e-4)
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feed one epoch loss; returns the (possibly reduced) learning rate.
    pub fn step(&mut self, epoch_loss: f64) -> f64 {
        match self.best {
            None => self.best = Some(epoch_loss),
            // Improvement exactly at the threshold counts as no improvement.
            Some(best) if best - epoch_loss > self.min_improvement => {
                self.best = Some(epoch_loss);
                self.bad_epochs = 0;
            }
            Some(_) => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.patience {
                    self.lr *= self.factor;
                    self.bad_epochs = 0;
                }
            }
        }
        self.lr
    }
}
