use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Step decay: `base_lr * decay^(number of decay epochs <= epoch)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub base_lr: f64,
    pub decay: f64,
    pub decay_epochs: Vec<usize>,
    pub epochs: usize,
}

impl Default for Schedule {
    /// Toy-scale default.
    fn default() -> Self {
        Schedule { base_lr: 1e-3, decay: 0.1, decay_epochs: vec![10, 20], epochs: 30 }
    }
}

impl Schedule {
    /// Full-scale schedule: 70 epochs, decay at 15 and 30.
    pub fn full_scale() -> Self {
        Schedule { base_lr: 1e-3, decay: 0.1, decay_epochs: vec![15, 30], epochs: 70 }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.base_lr >= 0.0 && self.base_lr.is_finite(), "base_lr must be finite and >= 0");
        ensure!(self.decay > 0.0 && self.decay <= 1.0, "decay must lie in (0, 1]");
        ensure!(self.decay_epochs.windows(2).all(|w| w[0] < w[1]), "decay epochs must be strictly increasing");
        ensure!(
            self.decay_epochs.iter().all(|&e| e < self.epochs),
            "decay epochs {:?} must be < total epochs {}",
            self.decay_epochs,
            self.epochs
        );
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let n = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.base_lr * self.decay.powi(n as i32)
    }
}
