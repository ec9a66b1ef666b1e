//! Pixel class statistics and effective-number weighting.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::ImageSample;
use crate::losses::ClassWeights;
use crate::{Error, Result};

/// `(1 - beta^n) / (1 - beta)`, evaluated without cancellation.
/// `E(0) = 0`, `E(1) = 1`, and `E(n) <= min(n, 1 / (1 - beta))`.
pub fn effective_number(n: u64, beta: f64) -> f64 {
    if n <= 1 || beta == 0.0 {
        return n.min(1) as f64;
    }
    let one_minus = 1.0 - beta;
    let e = -f64::exp_m1(n as f64 * f64::ln_1p(-one_minus)) / one_minus;
    e.min(n as f64).min(1.0 / one_minus)
}

fn check_beta(beta: f64) -> Result<()> {
    if (0.0..1.0).contains(&beta) {
        Ok(())
    } else {
        Err(Error::Invalid(format!("beta must lie in [0, 1), got {beta}")))
    }
}

/// Per-class pixel statistics, index 0 = background, 1 = building.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub pixel_count: [u64; 2],
    pub fraction: [f64; 2],
    pub beta: f64,
    pub effective_number: [f64; 2],
    pub weight: [f64; 2],
}

impl ClassStats {
    pub fn from_counts(pixel_count: [u64; 2], beta: f64) -> Result<Self> {
        check_beta(beta)?;
        let total = pixel_count[0] + pixel_count[1];
        if total == 0 {
            return Err(Error::Invalid("class statistics need at least one pixel".into()));
        }
        let fraction = [
            pixel_count[0] as f64 / total as f64,
            pixel_count[1] as f64 / total as f64,
        ];
        let effective_number = [effective_number(pixel_count[0], beta), effective_number(pixel_count[1], beta)];
        let weight = crate::losses::weights_from_counts(pixel_count, beta).0;
        Ok(Self {
            pixel_count,
            fraction,
            beta,
            effective_number,
            weight,
        })
    }

    pub fn weights(&self) -> ClassWeights {
        ClassWeights(self.weight)
    }
}

/// Building / background pixel counts of one mask.
pub fn count_pixels(mask: ArrayView2<u8>) -> [u64; 2] {
    let building = mask.iter().filter(|&&v| v == 1).count() as u64;
    [mask.len() as u64 - building, building]
}

pub fn compute_class_stats(samples: &[ImageSample], beta: f64) -> Result<ClassStats> {
    check_beta(beta)?;
    let mut counts = [0u64; 2];
    let mut any = false;
    for mask in samples.iter().filter_map(|s| s.mask.as_ref()) {
        any = true;
        let c = count_pixels(mask.view());
        counts[0] += c[0];
        counts[1] += c[1];
    }
    if !any {
        return Err(Error::Dataset("class statistics need at least one sample with a mask".into()));
    }
    ClassStats::from_counts(counts, beta)
}
