//! Segmentation losses with closed-form gradients.
//!
//! Every loss takes a batch of per-pixel class probabilities shaped
//! `(N, 2, H, W)` (channel 0 = background, channel 1 = building) and a binary
//! target shaped `(N, H, W)`, and returns the scalar value together with its
//! gradient with respect to each probability entry. Channels are treated as
//! independent inputs; the softmax Jacobian is applied by the caller.

use ndarray::{Array4, ArrayView3, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::stats::effective_number;
use crate::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

pub const BACKGROUND: usize = 0;
pub const BUILDING: usize = 1;

/// Per-class weights, indexed by class (background, building).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(pub [f64; 2]);

impl ClassWeights {
    pub const UNIT: ClassWeights = ClassWeights([1.0, 1.0]);

    pub fn of(&self, class: u8) -> f64 {
        self.0[class as usize]
    }

    fn validate(&self) -> Result<()> {
        if self.0.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::Invalid(format!("class weights must be positive, got {:?}", self.0)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Dice,
    WeightedCe,
    Focal,
    CombinedDiceFocal,
    WeightedMse,
}

/// Where class weights come from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum WeightSource {
    Unit,
    Fixed { weights: [f64; 2] },
    /// Inverse effective number from the training-set class statistics.
    ClassStats { beta: f64 },
    /// Inverse effective number recomputed on every batch.
    PerBatch { beta: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub gamma: f64,
    pub smooth: f64,
    pub weights: WeightSource,
    pub combine_alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Dice,
            gamma: 2.0,
            smooth: 1.0,
            weights: WeightSource::Unit,
            combine_alpha: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.gamma >= 0.0) {
            problems.push(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if !(self.smooth > 0.0) {
            problems.push(format!("smooth must be > 0, got {}", self.smooth));
        }
        if !(0.0..=1.0).contains(&self.combine_alpha) {
            problems.push(format!("combine_alpha must lie in [0, 1], got {}", self.combine_alpha));
        }
        match self.weights {
            WeightSource::Fixed { weights } => {
                if let Err(e) = ClassWeights(weights).validate() {
                    problems.push(e.to_string());
                }
            }
            WeightSource::ClassStats { beta } | WeightSource::PerBatch { beta } => {
                if !(0.0..1.0).contains(&beta) {
                    problems.push(format!("beta must lie in [0, 1), got {beta}"));
                }
            }
            WeightSource::Unit => {}
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Evaluates the configured loss. `dataset_weights` supplies weights for
    /// [`WeightSource::ClassStats`].
    pub fn evaluate(
        &self,
        probs: ArrayView4<f64>,
        target: ArrayView3<u8>,
        dataset_weights: Option<ClassWeights>,
    ) -> Result<LossOutput> {
        let weights = match self.weights {
            WeightSource::Unit => ClassWeights::UNIT,
            WeightSource::Fixed { weights } => ClassWeights(weights),
            WeightSource::ClassStats { .. } => dataset_weights.ok_or_else(|| {
                Error::Config("loss weights come from class statistics, but none were computed".into())
            })?,
            WeightSource::PerBatch { beta } => per_batch_weights(target, beta)?,
        };
        if !weights.is_valid_per_batch() {
            return Err(Error::Invalid(format!("unusable class weights {:?}", weights.0)));
        }
        match self.kind {
            LossKind::Dice => dice_loss(probs, target, self.smooth),
            LossKind::WeightedCe => {
                check_shapes(&probs, &target)?;
                Ok(ce_impl(probs, target, weights))
            }
            LossKind::Focal => {
                check_shapes(&probs, &target)?;
                Ok(focal_impl(probs, target, self.gamma, weights))
            }
            LossKind::CombinedDiceFocal => {
                let dice = dice_loss(probs, target, self.smooth)?;
                let focal = focal_impl(probs, target, self.gamma, weights);
                let a = self.combine_alpha;
                Ok(LossOutput {
                    value: a * dice.value + (1.0 - a) * focal.value,
                    grad: dice.grad * a + focal.grad * (1.0 - a),
                })
            }
            LossKind::WeightedMse => {
                let scores = probs.index_axis(Axis(1), if probs.shape()[1] == 1 { 0 } else { BUILDING });
                let out = weighted_mse(scores, target, weights)?;
                let mut grad = Array4::zeros(probs.raw_dim());
                let ch = if probs.shape()[1] == 1 { 0 } else { BUILDING };
                grad.index_axis_mut(Axis(1), ch).assign(&out.grad);
                Ok(LossOutput { value: out.value, grad })
            }
        }
    }
}

/// `(N, C, H, W)` f32 tensor to an f64 array.
pub fn tensor_to_array4(t: &footprint_grad::Tensor) -> Result<Array4<f64>> {
    let (n, c, h, w) = t.dims4()?;
    Array4::from_shape_vec((n, c, h, w), t.data().iter().map(|&v| f64::from(v)).collect())
        .map_err(|e| Error::Shape(e.to_string()))
}

/// Evaluates `config` on the probabilities held by node `probs` and
/// attaches the value to the graph with its analytic gradient. Returns the
/// loss node and the loss value.
pub fn attach_loss(
    g: &mut footprint_grad::Graph<'_>,
    probs: footprint_grad::NodeId,
    config: &LossConfig,
    target: ArrayView3<u8>,
    dataset_weights: Option<ClassWeights>,
) -> Result<(footprint_grad::NodeId, f64)> {
    let p = tensor_to_array4(g.value(probs))?;
    let out = config.evaluate(p.view(), target, dataset_weights)?;
    let shape = g.value(probs).shape().to_vec();
    let grad = footprint_grad::Tensor::new(&shape, out.grad.iter().map(|&v| v as f32).collect())?;
    let node = g.external_scalar(probs, out.value as f32, grad)?;
    Ok((node, out.value))
}

/// Loss value and its gradient with respect to the probability batch.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Array4<f64>,
}

/// Value and gradient for a single-channel score map `(N, H, W)`.
#[derive(Clone, Debug)]
pub struct ScoreLossOutput {
    pub value: f64,
    pub grad: ndarray::Array3<f64>,
}

fn check_shapes(probs: &ArrayView4<f64>, target: &ArrayView3<u8>) -> Result<()> {
    let (n, c, h, w) = probs.dim();
    if c != 2 {
        return Err(Error::Shape(format!("expected 2 probability channels, got {c}")));
    }
    if target.dim() != (n, h, w) {
        return Err(Error::Shape(format!(
            "probabilities {:?} vs target {:?}",
            probs.shape(),
            target.shape()
        )));
    }
    if target.iter().any(|&t| t > 1) {
        return Err(Error::Invalid("target must be binary".into()));
    }
    Ok(())
}

fn clamp_prob(p: f64) -> (f64, bool) {
    if p < PROB_EPS {
        (PROB_EPS, true)
    } else if p > 1.0 - PROB_EPS {
        (1.0 - PROB_EPS, true)
    } else {
        (p, false)
    }
}

/// Soft dice on the building channel: `1 - (2 sum(p t) + s) / (sum p + sum t + s)`
/// per sample, averaged over the batch. With `smooth == 0` and an empty
/// prediction and target the sample counts as a perfect match.
pub fn dice_loss(probs: ArrayView4<f64>, target: ArrayView3<u8>, smooth: f64) -> Result<LossOutput> {
    check_shapes(&probs, &target)?;
    if !(smooth >= 0.0) {
        return Err(Error::Invalid(format!("smooth must be >= 0, got {smooth}")));
    }
    let n = probs.shape()[0];
    let mut grad = Array4::zeros(probs.raw_dim());
    let mut total = 0.0;
    for i in 0..n {
        let p = probs.index_axis(Axis(0), i);
        let p1 = p.index_axis(Axis(0), BUILDING);
        let t = target.index_axis(Axis(0), i);
        let mut inter = 0.0;
        let mut sum_p = 0.0;
        let mut sum_t = 0.0;
        for (&pv, &tv) in p1.iter().zip(t.iter()) {
            inter += pv * tv as f64;
            sum_p += pv;
            sum_t += tv as f64;
        }
        let num = 2.0 * inter + smooth;
        let den = sum_p + sum_t + smooth;
        if den == 0.0 {
            continue;
        }
        total += 1.0 - num / den;
        let mut g = grad.index_axis_mut(Axis(0), i);
        let mut g1 = g.index_axis_mut(Axis(0), BUILDING);
        for (gv, &tv) in g1.iter_mut().zip(t.iter()) {
            *gv = -(2.0 * tv as f64 * den - num) / (den * den) / n as f64;
        }
    }
    Ok(LossOutput {
        value: total / n as f64,
        grad,
    })
}

/// Class-weighted focal loss, mean over pixels of `-w(t) (1 - p_t)^gamma ln p_t`.
pub fn focal_loss_weighted(
    probs: ArrayView4<f64>,
    target: ArrayView3<u8>,
    gamma: f64,
    weights: ClassWeights,
) -> Result<LossOutput> {
    check_shapes(&probs, &target)?;
    if !(gamma >= 0.0) {
        return Err(Error::Invalid(format!("focal gamma must be >= 0, got {gamma}")));
    }
    weights.validate()?;
    Ok(focal_impl(probs, target, gamma, weights))
}

fn focal_impl(probs: ArrayView4<f64>, target: ArrayView3<u8>, gamma: f64, weights: ClassWeights) -> LossOutput {
    let (n, _, h, w) = probs.dim();
    let m = (n * h * w) as f64;
    let mut grad = Array4::zeros(probs.raw_dim());
    let mut total = 0.0;
    for ((i, y, x), &t) in target.indexed_iter() {
        let (pt, clamped) = clamp_prob(probs[[i, t as usize, y, x]]);
        let wt = weights.of(t);
        let q = 1.0 - pt;
        let ln = pt.ln();
        let mod_ = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
        total += -wt * mod_ * ln;
        if !clamped {
            // d/dp [-(1-p)^g ln p] = g (1-p)^(g-1) ln p - (1-p)^g / p
            let dmod = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * ln };
            grad[[i, t as usize, y, x]] = wt * (dmod - mod_ / pt) / m;
        }
    }
    LossOutput { value: total / m, grad }
}

/// Unweighted focal loss.
pub fn focal_loss(probs: ArrayView4<f64>, target: ArrayView3<u8>, gamma: f64) -> Result<LossOutput> {
    focal_loss_weighted(probs, target, gamma, ClassWeights::UNIT)
}

/// Mean over pixels of `-w(t) ln p_t`.
pub fn weighted_ce_batch(probs: ArrayView4<f64>, target: ArrayView3<u8>, weights: ClassWeights) -> Result<LossOutput> {
    check_shapes(&probs, &target)?;
    weights.validate()?;
    Ok(ce_impl(probs, target, weights))
}

fn ce_impl(probs: ArrayView4<f64>, target: ArrayView3<u8>, weights: ClassWeights) -> LossOutput {
    let (n, _, h, w) = probs.dim();
    let m = (n * h * w) as f64;
    let mut grad = Array4::zeros(probs.raw_dim());
    let mut total = 0.0;
    for ((i, y, x), &t) in target.indexed_iter() {
        let (pt, clamped) = clamp_prob(probs[[i, t as usize, y, x]]);
        let wt = weights.of(t);
        total -= wt * pt.ln();
        if !clamped {
            grad[[i, t as usize, y, x]] = -wt / (pt * m);
        }
    }
    LossOutput { value: total / m, grad }
}

/// `alpha * dice + (1 - alpha) * focal`.
pub fn combined_dice_focal(
    probs: ArrayView4<f64>,
    target: ArrayView3<u8>,
    alpha: f64,
    gamma: f64,
    smooth: f64,
) -> Result<LossOutput> {
    combined_dice_focal_weighted(probs, target, alpha, gamma, smooth, ClassWeights::UNIT)
}

pub fn combined_dice_focal_weighted(
    probs: ArrayView4<f64>,
    target: ArrayView3<u8>,
    alpha: f64,
    gamma: f64,
    smooth: f64,
    weights: ClassWeights,
) -> Result<LossOutput> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let dice = dice_loss(probs, target, smooth)?;
    let focal = focal_loss_weighted(probs, target, gamma, weights)?;
    Ok(LossOutput {
        value: alpha * dice.value + (1.0 - alpha) * focal.value,
        grad: dice.grad * alpha + focal.grad * (1.0 - alpha),
    })
}

/// Mean of `w(t) (s - t)^2` over a single-channel score map `(N, H, W)`.
pub fn weighted_mse(scores: ArrayView3<f64>, target: ArrayView3<u8>, weights: ClassWeights) -> Result<ScoreLossOutput> {
    if scores.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "scores {:?} vs target {:?}",
            scores.shape(),
            target.shape()
        )));
    }
    weights.validate()?;
    let m = scores.len().max(1) as f64;
    let mut grad = ndarray::Array3::zeros(scores.raw_dim());
    let mut total = 0.0;
    for ((g, &s), &t) in grad.iter_mut().zip(scores.iter()).zip(target.iter()) {
        let wt = weights.of(t.min(1));
        let d = s - t as f64;
        total += wt * d * d;
        *g = 2.0 * wt * d / m;
    }
    Ok(ScoreLossOutput { value: total / m, grad })
}

/// Class weights from the pixel counts of one batch: inverse effective
/// number, normalised to sum to the class count. A class absent from the
/// batch gets weight 0.
pub fn per_batch_weights(target: ArrayView3<u8>, beta: f64) -> Result<ClassWeights> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::Invalid(format!("beta must lie in [0, 1), got {beta}")));
    }
    if target.is_empty() {
        return Err(Error::Invalid("batch has no pixels".into()));
    }
    let building = target.iter().filter(|&&t| t == 1).count() as u64;
    let counts = [target.len() as u64 - building, building];
    Ok(weights_from_counts(counts, beta))
}

/// Inverse-effective-number weights for present classes, scaled to sum to 2.
pub fn weights_from_counts(counts: [u64; 2], beta: f64) -> ClassWeights {
    let inv: Vec<f64> = counts
        .iter()
        .map(|&n| if n == 0 { 0.0 } else { 1.0 / effective_number(n, beta) })
        .collect();
    let total: f64 = inv.iter().sum();
    let scale = if total > 0.0 { 2.0 / total } else { 0.0 };
    ClassWeights([inv[0] * scale, inv[1] * scale])
}

impl ClassWeights {
    /// Nonnegative with at least one positive entry; zero marks a class
    /// absent from the batch.
    pub fn is_valid_per_batch(&self) -> bool {
        self.0.iter().all(|w| *w >= 0.0 && w.is_finite()) && self.0.iter().any(|w| *w > 0.0)
    }
}
