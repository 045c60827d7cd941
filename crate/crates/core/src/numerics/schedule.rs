/// Fraction of the total steps spent in linear warmup by default.
pub const DEFAULT_WARMUP_RATIO: f64 = 0.03;

/// Number of warmup steps: `ceil(warmup_ratio · total_steps)`.
pub fn warmup_steps(total_steps: usize, warmup_ratio: f64) -> usize {
    (warmup_ratio * total_steps as f64).ceil() as usize
}

/// Linear warmup to `peak_lr`, then cosine decay to zero at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, peak_lr: f64, warmup_ratio: f64) -> f64 {
    let warmup = warmup_steps(total_steps, warmup_ratio);
    if step < warmup {
        return peak_lr * step as f64 / warmup as f64;
    }
    if total_steps <= warmup {
        return peak_lr;
    }
    let progress = ((step - warmup) as f64 / (total_steps - warmup) as f64).min(1.0);
    peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
