/// ε(progress) = initial·(1 − progress), never below `floor`.
pub fn clip_range(progress: f64, initial: f64, floor: f64) -> f64 {
    (initial * (1.0 - progress.clamp(0.0, 1.0))).max(floor)
}

/// σ linear from `initial` at step 0 to `last` at `window`; `None` once the
/// window has closed (constraint inactive).
pub fn kl_budget(step: u64, window: u64, initial: f64, last: f64) -> Option<f64> {
    if step >= window {
        return None;
    }
    let f = step as f64 / window as f64;
    Some(initial + (last - initial) * f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_endpoints() {
        assert_eq!(clip_range(0.0, 0.2, 0.02), 0.2);
        assert_eq!(clip_range(1.0, 0.2, 0.02), 0.02);
        assert!((clip_range(0.5, 0.2, 0.02) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn sigma_midpoint_and_gate() {
        assert_eq!(kl_budget(0, 100, 0.1, 2.0), Some(0.1));
        assert!((kl_budget(50, 100, 0.1, 2.0).unwrap() - 1.05).abs() < 1e-12);
        assert_eq!(kl_budget(100, 100, 0.1, 2.0), None);
    }

    #[test]
    fn schedules_are_monotone() {
        let mut prev = f64::INFINITY;
        for k in 0..=100 {
            let e = clip_range(k as f64 / 100.0, 0.2, 0.02);
            assert!(e <= prev);
            prev = e;
        }
        let mut prev = f64::NEG_INFINITY;
        for s in 0..100 {
            let v = kl_budget(s, 100, 0.1, 2.0).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }
}
