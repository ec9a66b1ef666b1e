//! One-cycle learning-rate and momentum schedule.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OneCycle {
    pub max_lr: f64,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
    /// `(high, low)`; momentum starts high, dips to low at the peak lr.
    pub momentum_range: (f64, f64),
}

impl Default for OneCycle {
    fn default() -> Self {
        Self {
            max_lr: 1e-3,
            pct_start: 0.25,
            div_factor: 25.0,
            final_div_factor: 1e4,
            momentum_range: (0.95, 0.85),
        }
    }
}

/// Cosine interpolation from `a` (at 0) to `b` (at 1); both endpoints exact.
fn cos_interp(a: f64, b: f64, frac: f64) -> f64 {
    if frac <= 0.0 {
        a
    } else if frac >= 1.0 {
        b
    } else {
        b + (a - b) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

impl OneCycle {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.max_lr > 0.0) {
            problems.push(format!("max_lr must be > 0, got {}", self.max_lr));
        }
        if !(self.pct_start > 0.0 && self.pct_start < 1.0) {
            problems.push(format!("pct_start must lie in (0, 1), got {}", self.pct_start));
        }
        if !(self.div_factor >= 1.0) || !(self.final_div_factor >= 1.0) {
            problems.push("div factors must be >= 1".to_string());
        }
        let (hi, lo) = self.momentum_range;
        if !(0.0..1.0).contains(&hi) || !(0.0..1.0).contains(&lo) || lo > hi {
            problems.push(format!("momentum range must satisfy 0 <= low <= high < 1, got {:?}", self.momentum_range));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Step index where the learning rate peaks.
    pub fn peak_step(&self, total_steps: usize) -> usize {
        if total_steps < 2 {
            return 0;
        }
        ((self.pct_start * total_steps as f64).round() as usize).clamp(1, total_steps - 1)
    }

    pub fn initial_lr(&self) -> f64 {
        self.max_lr / self.div_factor
    }

    pub fn final_lr(&self) -> f64 {
        self.max_lr / self.final_div_factor
    }

    /// `(lr, momentum)` at `step` of `total_steps`.
    pub fn at(&self, step: usize, total_steps: usize) -> Result<(f64, f64)> {
        if step >= total_steps {
            return Err(Error::Invalid(format!("step {step} outside schedule of {total_steps} steps")));
        }
        let (hi, lo) = self.momentum_range;
        let peak = self.peak_step(total_steps);
        if step <= peak {
            let frac = if peak == 0 { 0.0 } else { step as f64 / peak as f64 };
            Ok((cos_interp(self.initial_lr(), self.max_lr, frac), cos_interp(hi, lo, frac)))
        } else {
            let frac = (step - peak) as f64 / (total_steps - 1 - peak) as f64;
            Ok((cos_interp(self.max_lr, self.final_lr(), frac), cos_interp(lo, hi, frac)))
        }
    }
}

/// Free-function form of [`OneCycle::at`].
pub fn one_cycle(step: usize, total_steps: usize, config: &OneCycle) -> Result<(f64, f64)> {
    config.at(step, total_steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn endpoints_and_peak() {
        let c = OneCycle { max_lr: 0.01, ..Default::default() };
        for total in [10, 100, 1000] {
            assert_eq!(c.at(0, total).unwrap(), (0.01 / 25.0, 0.95));
            let peak = c.peak_step(total);
            assert_eq!(peak, (0.25 * total as f64).round() as usize);
            assert_eq!(c.at(peak, total).unwrap(), (0.01, 0.85));
            assert_eq!(c.at(total - 1, total).unwrap(), (0.01 / 1e4, 0.95));
        }
        assert!(c.at(10, 10).is_err());
    }

    #[test]
    fn maximum_is_at_the_peak() {
        let c = OneCycle::default();
        let lrs: Vec<f64> = (0..1000).map(|s| c.at(s, 1000).unwrap().0).collect();
        let (arg, max) = lrs.iter().enumerate().fold((0, 0.0), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
        assert_eq!(max, c.max_lr);
        assert_eq!(arg, c.peak_step(1000));
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(OneCycle { pct_start: 1.0, ..Default::default() }.validate().is_err());
        assert!(OneCycle { max_lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(OneCycle { momentum_range: (0.8, 0.9), ..Default::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn anti_monotone(total in 2usize..2000, pct in 0.05f64..0.95) {
            let c = OneCycle { pct_start: pct, ..Default::default() };
            let pts: Vec<(f64, f64)> = (0..total).map(|s| c.at(s, total).unwrap()).collect();
            for w in pts.windows(2) {
                let (dl, dm) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
                prop_assert!(dl * dm <= 0.0, "{:?}", w);
            }
        }

        #[test]
        fn continuous_at_boundary(total in 20usize..2000) {
            let c = OneCycle::default();
            let p = c.peak_step(total);
            let jump = (c.at(p + 1, total).unwrap().0 - c.at(p, total).unwrap().0).abs();
            let step_scale = c.max_lr * 10.0 / total as f64;
            prop_assert!(jump <= step_scale);
        }
    }
}
