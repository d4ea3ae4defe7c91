use super::train::TrainConfig;

/// Learning rate at `step` of `total_steps`.
///
/// Measured in epochs `e = step * epochs / total_steps`, with warm-up length
/// `w = warmup_fraction * epochs` (one epoch at the defaults):
///
/// * `e < w`: linear rise from `min_lr` to `max_lr`;
/// * `w <= e < epochs - w`: linear fall back to `min_lr`;
/// * afterwards: constant `min_lr`.
pub fn lr_at(step: u64, total_steps: u64, cfg: &TrainConfig) -> f64 {
    let (min, max) = (cfg.min_lr, cfg.max_lr);
    if total_steps == 0 || cfg.epochs == 0 {
        return min;
    }
    let epochs = cfg.epochs as f64;
    let e = step.min(total_steps) as f64 * epochs / total_steps as f64;
    let warm_end = cfg.warmup_fraction * epochs;
    let decay_end = epochs - warm_end;
    if e < warm_end {
        min + (max - min) * (e / warm_end)
    } else if e < decay_end {
        max - (max - min) * ((e - warm_end) / (decay_end - warm_end))
    } else {
        min
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(min: f64, max: f64) -> TrainConfig {
        TrainConfig { min_lr: min, max_lr: max, ..TrainConfig::default() }
    }

    #[test]
    fn epoch_boundaries() {
        let c = cfg(2e-5, 2e-4);
        let total = 500;
        assert_eq!(lr_at(0, total, &c), 2e-5);
        assert_eq!(lr_at(100, total, &c), 2e-4);
        assert_eq!(lr_at(400, total, &c), 2e-5);
        assert_eq!(lr_at(450, total, &c), 2e-5);
        assert_eq!(lr_at(500, total, &c), 2e-5);
    }

    #[test]
    fn midway_through_decay() {
        // epoch 2.5 is half way from max (epoch 1) to min (epoch 4)
        let lr = lr_at(250, 500, &cfg(2e-5, 2e-4));
        assert!((lr - 1.1e-4).abs() < 1e-18, "{lr}");
    }

    #[test]
    fn flat_when_bounds_coincide() {
        let c = cfg(3e-4, 3e-4);
        assert!((0..=77).all(|s| lr_at(s, 77, &c) == 3e-4));
    }

    #[test]
    fn degenerate_totals() {
        assert_eq!(lr_at(0, 0, &cfg(1e-3, 1e-2)), 1e-3);
    }
}
