use std::f64::consts::PI;

/// One-cycle learning rate: cosine ramp from `peak / initial_divisor` to
/// `peak` over the warmup, then cosine anneal to `final_fraction * peak` at
/// the last epoch. Evaluated at fractional epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneCycle {
    pub peak: f64,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
    pub initial_divisor: f64,
    pub final_fraction: f64,
}

impl OneCycle {
    pub fn lr(&self, epoch: f64) -> f64 {
        let start = self.peak / self.initial_divisor;
        let end = self.peak * self.final_fraction;
        if epoch < self.warmup_epochs {
            let x = epoch / self.warmup_epochs;
            start + (self.peak - start) * 0.5 * (1.0 - (PI * x).cos())
        } else {
            let span = (self.total_epochs - self.warmup_epochs).max(f64::MIN_POSITIVE);
            let x = ((epoch - self.warmup_epochs) / span).min(1.0);
            end + (self.peak - end) * 0.5 * (1.0 + (PI * x).cos())
        }
    }
}
