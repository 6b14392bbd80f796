//! Linear warmup followed by linear decay to zero.

/// Number of warmup steps, `ceil(ratio · total)`.
pub fn warmup_steps(total_steps: usize, warmup_ratio: f64) -> usize {
    (warmup_ratio * total_steps as f64).ceil() as usize
}

/// Learning rate at `step` (0-based) of a `total_steps` schedule.
pub fn lr_at(step: usize, total_steps: usize, warmup_ratio: f64, peak_lr: f64) -> f64 {
    let total = total_steps.max(1);
    let step = step.min(total);
    let warmup = warmup_steps(total, warmup_ratio);
    if step < warmup {
        peak_lr * step as f64 / warmup as f64
    } else if warmup >= total {
        peak_lr
    } else {
        peak_lr * (total - step) as f64 / (total - warmup) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(lr_at(0, 100, 0.1, 1e-3), 0.0);
        assert_eq!(lr_at(10, 100, 0.1, 1e-3), 1e-3);
        assert!((lr_at(55, 100, 0.1, 1e-3) - 0.5e-3).abs() < 1e-18);
        assert_eq!(lr_at(100, 100, 0.1, 1e-3), 0.0);
    }

    #[test]
    fn no_warmup_starts_at_peak() {
        assert_eq!(lr_at(0, 10, 0.0, 2.0), 2.0);
        assert!((lr_at(5, 10, 0.0, 2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn piecewise_linear_with_peak_max() {
        for (total, ratio) in [(100, 0.1), (7, 0.3), (1, 0.5), (33, 0.0)] {
            let lrs: Vec<f64> = (0..=total).map(|s| lr_at(s, total, ratio, 1.0)).collect();
            let max = lrs.iter().cloned().fold(0.0, f64::max);
            assert!((max - 1.0).abs() < 1e-15, "{total} {ratio}");
            let w = warmup_steps(total, ratio);
            // constant slope on each side of the peak
            for s in 1..total {
                if s == w {
                    continue;
                }
                let d1 = lrs[s] - lrs[s - 1];
                let d2 = lrs[s + 1] - lrs[s];
                assert!((d1 - d2).abs() < 1e-12, "kink at {s}");
            }
        }
    }
}
