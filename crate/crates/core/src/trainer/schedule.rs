use std::f64::consts::PI;

/// Linear warmup from 0 to `base_lr`, then half-cosine decay to 0 at `total`.
pub fn cosine_lr(step: u64, total: u64, warmup: u64, base_lr: f64) -> f64 {
    let step = step.min(total);
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return base_lr;
    }
    let t = (step - warmup) as f64 / (total - warmup) as f64;
    base_lr * ((PI * t).cos() + 1.0) / 2.0
}

/// EMA decay rising from `omega_base` at step 0 to 1 at `total` along a cosine.
pub fn ema_omega(step: u64, total: u64, omega_base: f64) -> f64 {
    if total == 0 {
        return 1.0;
    }
    let t = step.min(total) as f64 / total as f64;
    1.0 - (1.0 - omega_base) * ((PI * t).cos() + 1.0) / 2.0
}
