use std::f64::consts::PI;

use super::TrainConfig;

/// Linear warmup from zero to `lr_max`, then cosine decay to `lr_min` at
/// `total_steps`. Steps past the end stay at `lr_min`.
pub fn lr_at(cfg: &TrainConfig, step: u64) -> f64 {
    if step > cfg.total_steps {
        return cfg.lr_min;
    }
    if step < cfg.warmup_steps {
        return cfg.lr_max * step as f64 / cfg.warmup_steps as f64;
    }
    let decay_span = cfg.total_steps - cfg.warmup_steps;
    let progress = if decay_span == 0 { 1.0 } else { (step - cfg.warmup_steps) as f64 / decay_span as f64 };
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn experiment1_points() {
        let cfg = TrainConfig::experiment1();
        assert_eq!(lr_at(&cfg, 0), 0.0);
        assert!((lr_at(&cfg, 1_000) - 4e-4).abs() <= 1e-12);
        assert!((lr_at(&cfg, 100_000) - 4e-6).abs() <= 1e-12);
        let mid = 1_000 + (100_000 - 1_000) / 2;
        let want = 4e-6 + 0.5 * (4e-4 - 4e-6);
        assert!((lr_at(&cfg, mid) - want).abs() <= 1e-12);
        assert_eq!(lr_at(&cfg, 200_000), 4e-6);
        assert!((lr_at(&cfg, 500) - 2e-4).abs() <= 1e-15);
    }

    #[test]
    fn experiment2_1_points() {
        let cfg = TrainConfig::experiment2_1();
        assert!((lr_at(&cfg, 1_000) - 4e-6).abs() <= 1e-15);
        assert!((lr_at(&cfg, 20_000) - 4e-7).abs() <= 1e-15);
    }

    #[test]
    fn continuous_and_monotone_after_warmup() {
        let cfg = TrainConfig { total_steps: 2_000, warmup_steps: 100, ..TrainConfig::experiment1() };
        let below = lr_at(&cfg, 99);
        let at = lr_at(&cfg, 100);
        assert!((at - below) <= cfg.lr_max / 100.0 + 1e-15);
        let mut prev = at;
        for s in 101..=2_000 {
            let lr = lr_at(&cfg, s);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn degenerate_spans() {
        let no_decay = TrainConfig { total_steps: 10, warmup_steps: 10, ..TrainConfig::experiment1() };
        assert_eq!(lr_at(&no_decay, 10), no_decay.lr_min);
        let no_warmup = TrainConfig { total_steps: 10, warmup_steps: 0, ..TrainConfig::experiment1() };
        assert_eq!(lr_at(&no_warmup, 0), no_warmup.lr_max);
    }
}
