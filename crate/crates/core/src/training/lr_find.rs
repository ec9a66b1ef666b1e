//! Learning-rate range test.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const SMOOTHING: f64 = 0.98;
pub const DIVERGENCE_FACTOR: f64 = 4.0;

/// One optimisation step at a given learning rate, returning its loss.
pub trait LrProbe {
    fn step(&mut self, lr: f64) -> Result<f64>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrFindResult {
    pub lrs: Vec<f64>,
    pub raw_losses: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub suggestion: f64,
    /// True when the sweep stopped before `steps`.
    pub stopped_early: bool,
}

/// Sweeps lr log-uniformly from `min_lr` to `max_lr`. Stops without
/// recording when a loss is non-finite or the smoothed loss exceeds four
/// times the best so far.
pub fn lr_find(probe: &mut dyn LrProbe, min_lr: f64, max_lr: f64, steps: usize) -> Result<LrFindResult> {
    if !(min_lr > 0.0 && min_lr < max_lr) {
        return Err(Error::Invalid(format!("lr range must satisfy 0 < min < max, got ({min_lr}, {max_lr})")));
    }
    if steps < 10 {
        return Err(Error::Invalid(format!("lr finder needs at least 10 steps, got {steps}")));
    }
    let ratio = max_lr / min_lr;
    let mut out = LrFindResult {
        lrs: Vec::new(),
        raw_losses: Vec::new(),
        smoothed: Vec::new(),
        suggestion: min_lr,
        stopped_early: false,
    };
    let mut avg = 0.0;
    let mut best = f64::INFINITY;
    for i in 0..steps {
        let lr = if i == 0 { min_lr } else { min_lr * ratio.powf(i as f64 / (steps - 1) as f64) };
        let loss = probe.step(lr)?;
        if !loss.is_finite() {
            if i == 0 {
                return Err(Error::LrFinderDiverged { lr });
            }
            out.stopped_early = true;
            break;
        }
        avg = SMOOTHING * avg + (1.0 - SMOOTHING) * loss;
        let smoothed = avg / (1.0 - SMOOTHING.powi(i as i32 + 1));
        if i > 0 && smoothed > DIVERGENCE_FACTOR * best {
            out.stopped_early = true;
            break;
        }
        best = best.min(smoothed);
        out.lrs.push(lr);
        out.raw_losses.push(loss);
        out.smoothed.push(smoothed);
    }
    out.suggestion = steepest_descent(&out.lrs, &out.smoothed);
    Ok(out)
}

/// lr at the most negative slope of loss against log lr (central
/// differences inside, one-sided at the ends).
pub fn steepest_descent(lrs: &[f64], losses: &[f64]) -> f64 {
    let n = lrs.len();
    if n < 2 {
        return lrs.first().copied().unwrap_or(f64::NAN);
    }
    let x: Vec<f64> = lrs.iter().map(|l| l.ln()).collect();
    let slope = |i: usize| {
        let (a, b) = match i {
            0 => (0, 1),
            _ if i == n - 1 => (n - 2, n - 1),
            _ => (i - 1, i + 1),
        };
        (losses[b] - losses[a]) / (x[b] - x[a])
    };
    let mut best = (0, f64::INFINITY);
    for i in 0..n {
        let s = slope(i);
        if s < best.1 {
            best = (i, s);
        }
    }
    lrs[best.0]
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Gradient descent on `L/2 w^2`; stable iff lr < 2/L.
    struct Quadratic {
        w: f64,
        curvature: f64,
    }

    impl LrProbe for Quadratic {
        fn step(&mut self, lr: f64) -> Result<f64> {
            let loss = 0.5 * self.curvature * self.w * self.w;
            self.w -= lr * self.curvature * self.w;
            Ok(loss)
        }
    }

    #[test]
    fn quadratic_suggestion_is_stable() {
        for curvature in [0.5, 2.0, 10.0] {
            let mut q = Quadratic { w: 3.0, curvature };
            let r = lr_find(&mut q, 1e-4, 10.0, 100).unwrap();
            assert!(r.suggestion < 2.0 / curvature, "L={curvature}: {}", r.suggestion);
            assert!(r.suggestion > 1e-4);
        }
    }

    #[test]
    fn short_sweep_shape() {
        let mut q = Quadratic { w: 1.0, curvature: 1e-3 };
        let r = lr_find(&mut q, 0.1, 1.0, 10).unwrap();
        assert!(r.lrs.len() <= 10);
        assert_eq!(r.lrs[0], 0.1);
        assert!((r.lrs.last().unwrap() - 1.0).abs() < 1e-12);
    }

    struct Planted {
        calls: usize,
        blow_at: usize,
        value: f64,
    }

    impl LrProbe for Planted {
        fn step(&mut self, _lr: f64) -> Result<f64> {
            let i = self.calls;
            self.calls += 1;
            Ok(if i >= self.blow_at { self.value } else { 10.0 - i as f64 * 0.1 })
        }
    }

    #[test]
    fn divergence_truncates_the_record() {
        for value in [f64::NAN, f64::INFINITY, 1e6] {
            let mut p = Planted { calls: 0, blow_at: 17, value };
            let r = lr_find(&mut p, 1e-5, 1.0, 50).unwrap();
            assert_eq!(r.lrs.len(), 17, "{value}");
            assert!(r.stopped_early);
            assert!(r.lrs.contains(&r.suggestion));
        }
    }

    #[test]
    fn first_step_divergence_is_an_error() {
        let mut p = Planted { calls: 0, blow_at: 0, value: f64::NAN };
        let err = lr_find(&mut p, 1e-3, 1.0, 20).unwrap_err();
        assert!(matches!(err, Error::LrFinderDiverged { .. }));
        assert!(err.to_string().contains("lower the minimum"));
    }

    #[test]
    fn argument_checks() {
        let mut q = Quadratic { w: 1.0, curvature: 1.0 };
        assert!(lr_find(&mut q, 1.0, 0.1, 20).is_err());
        assert!(lr_find(&mut q, 0.1, 1.0, 9).is_err());
    }
}
