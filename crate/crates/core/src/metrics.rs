//! Pixel-level segmentation metrics. Building is the positive class.

use std::ops::{Add, AddAssign};

use ndarray::{ArrayView2, ArrayViewD, Dimension};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Counts with prediction and target roles exchanged.
    pub fn swapped(&self) -> Self {
        Self::new(self.tp, self.fn_, self.fp, self.tn)
    }
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.tp + o.tp, self.fp + o.fp, self.fn_ + o.fn_, self.tn + o.tn)
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub iou: f64,
    pub f1: f64,
    /// Same quantity as `f1`; binary dice equals F1.
    pub dice_score: f64,
    pub counts: ConfusionCounts,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pr_points: Vec<PrPoint>,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "accuracy,iou,f1,dice_score,tp,fp,fn,tn";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.accuracy,
            self.iou,
            self.f1,
            self.dice_score,
            self.counts.tp,
            self.counts.fp,
            self.counts.fn_,
            self.counts.tn
        )
    }
}

/// Counts over any pair of equally shaped binary arrays.
pub fn confusion_nd(pred: ArrayViewD<u8>, target: ArrayViewD<u8>) -> Result<ConfusionCounts> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(target.iter()) {
        match (p, t) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            _ => return Err(Error::Invalid(format!("masks must be binary, found values ({p}, {t})"))),
        }
    }
    Ok(c)
}

pub fn confusion(pred: ArrayView2<u8>, target: ArrayView2<u8>) -> Result<ConfusionCounts> {
    confusion_nd(pred.into_dyn(), target.into_dyn())
}

pub fn scores(counts: ConfusionCounts) -> MetricReport {
    let ConfusionCounts { tp, fp, fn_, tn } = counts;
    let total = counts.total();
    let accuracy = if total == 0 { 1.0 } else { (tp + tn) as f64 / total as f64 };
    let union = tp + fp + fn_;
    let (iou, f1) = if union == 0 {
        (1.0, 1.0)
    } else {
        (tp as f64 / union as f64, 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
    };
    MetricReport {
        accuracy,
        iou,
        f1,
        dice_score: f1,
        counts,
        pr_points: Vec::new(),
    }
}

/// F1 implied by an IoU value.
pub fn f1_from_iou(iou: f64) -> f64 {
    2.0 * iou / (1.0 + iou)
}

/// `n` evenly spaced thresholds covering [0, 1].
pub fn default_thresholds(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

/// Accumulates per-threshold counts over many batches of building
/// probabilities.
#[derive(Clone, Debug)]
pub struct PrAccumulator {
    thresholds: Vec<f64>,
    counts: Vec<ConfusionCounts>,
}

impl PrAccumulator {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(Error::Invalid("threshold list is empty".into()));
        }
        if thresholds.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(Error::Invalid("thresholds must be sorted ascending".into()));
        }
        let counts = vec![ConfusionCounts::default(); thresholds.len()];
        Ok(Self { thresholds, counts })
    }

    /// `building` holds building-class probabilities aligned with `target`.
    pub fn add<D: Dimension>(
        &mut self,
        building: ndarray::ArrayView<f32, D>,
        target: ndarray::ArrayView<u8, D>,
    ) -> Result<()> {
        if building.shape() != target.shape() {
            return Err(Error::Shape(format!(
                "probabilities {:?} vs target {:?}",
                building.shape(),
                target.shape()
            )));
        }
        // Sorting lets each threshold be resolved with a binary search.
        let mut pos: Vec<f64> = Vec::new();
        let mut neg: Vec<f64> = Vec::new();
        for (&p, &t) in building.iter().zip(target.iter()) {
            match t {
                1 => pos.push(p as f64),
                0 => neg.push(p as f64),
                _ => return Err(Error::Invalid("target must be binary".into())),
            }
        }
        pos.sort_by(f64::total_cmp);
        neg.sort_by(f64::total_cmp);
        for (tau, c) in self.thresholds.iter().zip(self.counts.iter_mut()) {
            let pos_below = pos.partition_point(|&p| p < *tau) as u64;
            let neg_below = neg.partition_point(|&p| p < *tau) as u64;
            c.tp += pos.len() as u64 - pos_below;
            c.fn_ += pos_below;
            c.fp += neg.len() as u64 - neg_below;
            c.tn += neg_below;
        }
        Ok(())
    }

    pub fn points(&self) -> Vec<PrPoint> {
        self.thresholds
            .iter()
            .zip(&self.counts)
            .map(|(&threshold, c)| PrPoint {
                threshold,
                precision: ratio_or_one(c.tp, c.tp + c.fp),
                recall: ratio_or_one(c.tp, c.tp + c.fn_),
            })
            .collect()
    }
}

fn ratio_or_one(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision/recall of `p1 >= tau` for each threshold. Precision with no
/// predicted positives is 1; recall with no actual positives is 1.
pub fn pr_curve(building: ArrayView2<f32>, target: ArrayView2<u8>, thresholds: &[f64]) -> Result<Vec<PrPoint>> {
    let mut acc = PrAccumulator::new(thresholds.to_vec())?;
    acc.add(building, target)?;
    Ok(acc.points())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array2};
    use proptest::prelude::*;

    #[test]
    fn all_ones_counts() {
        let m = Array2::<u8>::ones((2, 5));
        assert_eq!(confusion(m.view(), m.view()).unwrap(), ConfusionCounts::new(10, 0, 0, 0));
    }

    #[test]
    fn complement_has_no_agreement() {
        let t = arr2(&[[1u8, 0, 1], [0, 0, 1]]);
        let p = t.mapv(|v| 1 - v);
        let c = confusion(p.view(), t.view()).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert_eq!(c.total(), 6);
    }

    #[test]
    fn crafted_grid_counts_and_scores() {
        let pred = arr2(&[[1u8, 1, 1, 1, 0], [0, 0, 0, 0, 0]]);
        let target = arr2(&[[1u8, 1, 1, 0, 1], [0, 0, 0, 0, 0]]);
        let c = confusion(pred.view(), target.view()).unwrap();
        assert_eq!(c, ConfusionCounts::new(3, 1, 1, 5));
        let r = scores(c);
        assert!((r.accuracy - 0.8).abs() < 1e-12);
        assert!((r.iou - 0.6).abs() < 1e-12);
        assert!((r.f1 - 0.75).abs() < 1e-12);
        assert_eq!(r.f1, r.dice_score);
    }

    #[test]
    fn non_binary_rejected() {
        let a = arr2(&[[2u8]]);
        assert!(confusion(a.view(), a.view()).is_err());
    }

    #[test]
    fn empty_union_is_perfect() {
        let r = scores(ConfusionCounts::new(0, 0, 0, 7));
        assert_eq!((r.iou, r.f1, r.accuracy), (1.0, 1.0, 1.0));
    }

    #[test]
    fn published_iou_f1_pairs() {
        for (iou, f1) in [(0.717, 0.836), (0.726, 0.841), (0.702, 0.824)] {
            assert!((f1_from_iou(iou) - f1).abs() <= 1e-3, "{iou} -> {}", f1_from_iou(iou));
        }
    }

    #[test]
    fn pr_extremes() {
        let p = arr2(&[[0.2f32, 0.9], [0.4, 0.6]]);
        let t = arr2(&[[0u8, 1], [1, 0]]);
        let pts = pr_curve(p.view(), t.view(), &[0.0, 1.0 + 1e-9]).unwrap();
        assert_eq!(pts[0].recall, 1.0);
        assert_eq!(pts[1].recall, 0.0);
        assert_eq!(pts[1].precision, 1.0);
        assert!(pr_curve(p.view(), t.view(), &[]).is_err());
        assert!(pr_curve(p.view(), t.view(), &[0.5, 0.1]).is_err());
    }

    #[test]
    fn pr_matches_brute_force_recount() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let p = Array2::from_shape_fn((8, 8), |_| rng.random::<f32>());
        let t = Array2::from_shape_fn((8, 8), |_| rng.random_bool(0.4) as u8);
        let th = default_thresholds(11);
        let pts = pr_curve(p.view(), t.view(), &th).unwrap();
        for (pt, &tau) in pts.iter().zip(&th) {
            let pred = p.mapv(|v| (v as f64 >= tau) as u8);
            let c = confusion(pred.view(), t.view()).unwrap();
            let prec = if c.tp + c.fp == 0 { 1.0 } else { c.tp as f64 / (c.tp + c.fp) as f64 };
            let rec = if c.tp + c.fn_ == 0 { 1.0 } else { c.tp as f64 / (c.tp + c.fn_) as f64 };
            assert_eq!((pt.precision, pt.recall), (prec, rec), "tau {tau}");
        }
    }

    #[test]
    fn default_threshold_grid() {
        let th = default_thresholds(101);
        assert_eq!(th.len(), 101);
        assert_eq!((th[0], th[50], th[100]), (0.0, 0.5, 1.0));
    }

    proptest! {
        #[test]
        fn f1_iou_identity(tp in 0u64..1000, fp in 0u64..1000, fn_ in 0u64..1000, tn in 0u64..1000) {
            let r = scores(ConfusionCounts::new(tp, fp, fn_, tn));
            prop_assert!((r.f1 - f1_from_iou(r.iou)).abs() < 1e-9);
        }

        #[test]
        fn swap_symmetry(bits in proptest::collection::vec((0u8..2, 0u8..2), 1..64)) {
            let p = ndarray::Array1::from_iter(bits.iter().map(|b| b.0)).into_dyn();
            let t = ndarray::Array1::from_iter(bits.iter().map(|b| b.1)).into_dyn();
            let a = scores(confusion_nd(p.view(), t.view()).unwrap());
            let b = scores(confusion_nd(t.view(), p.view()).unwrap());
            prop_assert_eq!(a.iou, b.iou);
            prop_assert_eq!(a.f1, b.f1);
        }

        #[test]
        fn recall_nonincreasing(vals in proptest::collection::vec((0f32..1.0, 0u8..2), 1..64)) {
            let p = ndarray::Array2::from_shape_fn((1, vals.len()), |(_, i)| vals[i].0);
            let t = ndarray::Array2::from_shape_fn((1, vals.len()), |(_, i)| vals[i].1);
            let pts = pr_curve(p.view(), t.view(), &default_thresholds(21)).unwrap();
            for w in pts.windows(2) {
                prop_assert!(w[1].recall <= w[0].recall);
            }
        }

        #[test]
        fn permutation_invariance(bits in proptest::collection::vec((0u8..2, 0u8..2), 2..40), seed in 0u64..100) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut shuffled = bits.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let count = |b: &[(u8, u8)]| {
                let p = ndarray::Array1::from_iter(b.iter().map(|x| x.0)).into_dyn();
                let t = ndarray::Array1::from_iter(b.iter().map(|x| x.1)).into_dyn();
                confusion_nd(p.view(), t.view()).unwrap()
            };
            prop_assert_eq!(count(&bits), count(&shuffled));
        }
    }
}
