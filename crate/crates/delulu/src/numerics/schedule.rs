//! Linear warmup followed by polynomial decay to zero.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Decay exponent; 1.0 is plain linear decay.
    pub decay_power: f64,
}

impl LrSchedule {
    pub fn new(peak_lr: f64, warmup_steps: u64, total_steps: u64, decay_power: f64) -> Self {
        assert!(warmup_steps > 0 && warmup_steps < total_steps, "0 < warmup < total required");
        LrSchedule { peak_lr, warmup_steps, total_steps, decay_power }
    }

    /// lr(0) = 0, lr(warmup) = peak, lr(total) = 0; steps past total clamp
    /// to zero with a logged warning.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step > self.total_steps {
            log::warn!("lr_at: step {step} past total_steps {}, clamping lr to 0", self.total_steps);
            return 0.0;
        }
        if step <= self.warmup_steps {
            self.peak_lr * step as f64 / self.warmup_steps as f64
        } else {
            let frac = (step - self.warmup_steps) as f64
                / (self.total_steps - self.warmup_steps) as f64;
            self.peak_lr * (1.0 - frac).powf(self.decay_power)
        }
    }
}
