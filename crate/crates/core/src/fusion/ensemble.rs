//! Max-confidence ensemble merge and thresholding.

use ndarray::{Array2, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Per-pixel probabilities within this distance of summing to 1 are
/// accepted.
pub const SUM_TOLERANCE: f32 = 1e-3;

/// Two-class probabilities `(2, H, W)`; channel 1 is the building class.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMask {
    data: Array3<f32>,
}

impl ProbabilityMask {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 2 {
            return Err(Error::Shape(format!("probability mask needs 2 channels, got {c}")));
        }
        for y in 0..h {
            for x in 0..w {
                let (a, b) = (data[[0, y, x]], data[[1, y, x]]);
                if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || (a + b - 1.0).abs() > SUM_TOLERANCE {
                    return Err(Error::Invalid(format!(
                        "pixel ({y}, {x}) holds ({a}, {b}), not a probability distribution"
                    )));
                }
            }
        }
        Ok(Self { data })
    }

    /// `(1 - p, p)` from building probabilities.
    pub fn from_building(p: Array2<f32>) -> Result<Self> {
        let (h, w) = p.dim();
        Self::new(Array3::from_shape_fn((2, h, w), |(c, y, x)| if c == 1 { p[[y, x]] } else { 1.0 - p[[y, x]] }))
    }

    pub fn data(&self) -> ArrayView3<'_, f32> {
        self.data.view()
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn building(&self) -> ndarray::ArrayView2<'_, f32> {
        self.data.index_axis(Axis(0), 1)
    }

    /// Max-channel probability per pixel.
    pub fn confidence(&self) -> Array2<f32> {
        let bg = self.data.index_axis(Axis(0), 0);
        let fg = self.data.index_axis(Axis(0), 1);
        ndarray::Zip::from(&bg).and(&fg).map_collect(|&a, &b| a.max(b))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub threshold: f32,
    pub member_ids: Vec<String>,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self { threshold: 0.75, member_ids: Vec::new() }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        check_threshold(self.threshold)?;
        if self.member_ids.len() < 2 {
            return Err(Error::Config(format!("an ensemble needs at least 2 members, got {}", self.member_ids.len())));
        }
        Ok(())
    }
}

fn check_threshold(t: f32) -> Result<()> {
    if !(t > 0.5 && t <= 1.0) {
        return Err(Error::Config(format!("confidence threshold must lie in (0.5, 1], got {t}")));
    }
    Ok(())
}

/// Copies, at each pixel, the distribution of the member whose larger class
/// probability is highest; ties go to the lowest member index.
pub fn ensemble_merge(masks: &[ProbabilityMask]) -> Result<ProbabilityMask> {
    let first = masks.first().ok_or_else(|| Error::Invalid("ensemble needs at least one mask".into()))?;
    let dim = first.data.dim();
    for (i, m) in masks.iter().enumerate() {
        if m.data.dim() != dim {
            return Err(Error::Shape(format!(
                "member {i} has shape {:?}, member 0 has {:?}",
                m.data.dim(),
                dim
            )));
        }
    }
    let (_, h, w) = dim;
    let mut out = first.data.clone();
    for y in 0..h {
        for x in 0..w {
            let conf = |m: &ProbabilityMask| m.data[[0, y, x]].max(m.data[[1, y, x]]);
            let mut best = 0;
            let mut best_conf = conf(first);
            for (i, m) in masks.iter().enumerate().skip(1) {
                let c = conf(m);
                if c > best_conf {
                    best = i;
                    best_conf = c;
                }
            }
            out[[0, y, x]] = masks[best].data[[0, y, x]];
            out[[1, y, x]] = masks[best].data[[1, y, x]];
        }
    }
    Ok(ProbabilityMask { data: out })
}

/// Building iff the building probability is at least `threshold`.
pub fn confidence_threshold(merged: &ProbabilityMask, threshold: f32) -> Result<Array2<u8>> {
    check_threshold(threshold)?;
    Ok(merged.building().mapv(|p| (p >= threshold) as u8))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pixel(bg: f32, fg: f32) -> ProbabilityMask {
        ProbabilityMask::new(Array3::from_shape_vec((2, 1, 1), vec![bg, fg]).unwrap()).unwrap()
    }

    #[test]
    fn most_confident_member_wins() {
        let m = ensemble_merge(&[pixel(0.6, 0.4), pixel(0.2, 0.8), pixel(0.55, 0.45)]).unwrap();
        assert_eq!(m.data().iter().copied().collect::<Vec<_>>(), vec![0.2, 0.8]);
    }

    #[test]
    fn ties_go_to_the_lowest_index() {
        let m = ensemble_merge(&[pixel(0.9, 0.1), pixel(0.1, 0.9)]).unwrap();
        assert_eq!(m.building()[[0, 0]], 0.1);
        let m = ensemble_merge(&[pixel(0.1, 0.9), pixel(0.9, 0.1)]).unwrap();
        assert_eq!(m.building()[[0, 0]], 0.9);
    }

    #[test]
    fn threshold_bounds() {
        let t = |p: f32| confidence_threshold(&pixel(1.0 - p, p), 0.75).unwrap()[[0, 0]];
        assert_eq!(t(0.8), 1);
        assert_eq!(t(0.75), 1);
        assert_eq!(t(0.70), 0);
        assert!(confidence_threshold(&pixel(0.5, 0.5), 0.5).is_err());
        assert!(confidence_threshold(&pixel(0.5, 0.5), 1.01).is_err());
    }

    #[test]
    fn invalid_inputs() {
        assert!(ProbabilityMask::new(Array3::from_elem((2, 1, 1), 0.7)).is_err());
        assert!(ProbabilityMask::new(Array3::from_elem((3, 1, 1), 0.2)).is_err());
        let a = ProbabilityMask::from_building(Array2::from_elem((2, 2), 0.3)).unwrap();
        let b = ProbabilityMask::from_building(Array2::from_elem((2, 3), 0.3)).unwrap();
        let err = ensemble_merge(&[a, b]).unwrap_err().to_string();
        assert!(err.contains("member 1"), "{err}");
        assert!(ensemble_merge(&[]).is_err());
        assert!(EnsembleConfig { member_ids: vec!["a".into()], ..Default::default() }.validate().is_err());
    }

    fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = ProbabilityMask> {
        proptest::collection::vec(0u8..=10, h * w).prop_map(move |v| {
            ProbabilityMask::from_building(Array2::from_shape_vec((h, w), v.into_iter().map(|k| k as f32 / 10.0).collect()).unwrap())
                .unwrap()
        })
    }

    proptest! {
        #[test]
        fn merge_of_one_is_identity(m in mask_strategy(3, 4)) {
            prop_assert_eq!(ensemble_merge(std::slice::from_ref(&m)).unwrap(), m);
        }

        #[test]
        fn merged_confidence_is_the_member_maximum(ms in proptest::collection::vec(mask_strategy(3, 3), 2..5)) {
            let merged = ensemble_merge(&ms).unwrap().confidence();
            for ((y, x), &c) in merged.indexed_iter() {
                let best = ms.iter().map(|m| m.confidence()[[y, x]]).fold(0.0f32, f32::max);
                prop_assert_eq!(c, best);
            }
        }

        #[test]
        fn raising_the_threshold_never_adds_buildings(m in mask_strategy(4, 4), a in 0.51f32..1.0, b in 0.51f32..1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let l = confidence_threshold(&m, lo).unwrap();
            let h = confidence_threshold(&m, hi).unwrap();
            prop_assert!(h.iter().zip(l.iter()).all(|(&h, &l)| h <= l));
        }

        #[test]
        fn merge_is_permutation_equivariant_without_ties(
            a in mask_strategy(2, 2), b in mask_strategy(2, 2), c in mask_strategy(2, 2)
        ) {
            let abc = ensemble_merge(&[a.clone(), b.clone(), c.clone()]).unwrap();
            let cab = ensemble_merge(&[c.clone(), a.clone(), b.clone()]).unwrap();
            for y in 0..2 {
                for x in 0..2 {
                    let confs: Vec<f32> = [&a, &b, &c].iter().map(|m| m.confidence()[[y, x]]).collect();
                    let top = confs.iter().cloned().fold(0.0f32, f32::max);
                    let winners: Vec<usize> = (0..3).filter(|&i| confs[i] == top).collect();
                    let distinct = winners.iter().map(|&i| [&a, &b, &c][i].building()[[y, x]].to_bits())
                        .collect::<std::collections::BTreeSet<_>>();
                    if distinct.len() == 1 {
                        prop_assert_eq!(abc.building()[[y, x]], cab.building()[[y, x]]);
                    }
                }
            }
        }
    }
}
