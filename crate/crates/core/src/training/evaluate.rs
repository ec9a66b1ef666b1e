//! Evaluation-mode inference over a labelled set.

use ndarray::{s, Array2, Array3, Array4, Axis};

use footprint_grad::Tensor;

use crate::dataset::patch::Patch;
use crate::losses::{tensor_to_array4, ClassWeights, LossConfig};
use crate::metrics::{default_thresholds, scores, ConfusionCounts, MetricReport, PrAccumulator};
use crate::models::Model;
use crate::{Error, Result};

/// Anything that maps an `(N, 3, H, W)` batch to class probabilities:
/// `(N, 2, H, W)`, or `(N, 1, H, W)` building scores.
pub trait Segmenter {
    fn predict_batch(&self, batch: &Tensor) -> Result<Tensor>;
}

impl Segmenter for Model {
    fn predict_batch(&self, batch: &Tensor) -> Result<Tensor> {
        self.predict(batch)
    }
}

/// Promotes a one-channel score map to `(1 - s, s)`.
pub fn two_channel(probs: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = probs.dims4()?;
    match c {
        2 => Ok(probs.clone()),
        1 => {
            let plane = h * w;
            let mut out = Vec::with_capacity(n * 2 * plane);
            for chunk in probs.data().chunks(plane) {
                out.extend(chunk.iter().map(|v| 1.0 - v));
                out.extend_from_slice(chunk);
            }
            Ok(Tensor::new(&[n, 2, h, w], out)?)
        }
        _ => Err(Error::Shape(format!("expected 1 or 2 output channels, got {c}"))),
    }
}

/// Building iff its probability strictly exceeds background; ties go to
/// background.
pub fn argmax_mask(probs: &Array4<f32>) -> Array3<u8> {
    let bg = probs.index_axis(Axis(1), 0);
    let fg = probs.index_axis(Axis(1), 1);
    ndarray::Zip::from(&fg).and(&bg).map_collect(|&f, &b| (f > b) as u8)
}

/// Stacks patches into an input tensor and a target batch. Every patch
/// must carry a mask and share one size.
pub fn make_batch(items: &[&Patch]) -> Result<(Tensor, Array3<u8>)> {
    let first = items.first().ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let (c, h, w) = first.image.dim();
    let mut data = Vec::with_capacity(items.len() * c * h * w);
    let mut target = Array3::zeros((items.len(), h, w));
    for (i, p) in items.iter().enumerate() {
        if p.image.dim() != (c, h, w) {
            return Err(Error::Shape(format!("batch mixes sizes {:?} and {:?}", (c, h, w), p.image.dim())));
        }
        data.extend(p.image.iter());
        let mask = p.mask.as_ref().ok_or_else(|| Error::Dataset("patch without a mask in a labelled set".into()))?;
        target.slice_mut(s![i, .., ..]).assign(mask);
    }
    Ok((Tensor::new(&[items.len(), c, h, w], data)?, target))
}

/// One inspection triple.
#[derive(Clone, Debug)]
pub struct SampleTriple {
    pub image: Array3<f32>,
    pub target: Array2<u8>,
    pub prediction: Array2<u8>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricReport,
    /// Mean per-batch loss weighted by batch size, when a loss was given.
    pub mean_loss: Option<f64>,
    pub samples: Vec<SampleTriple>,
}

#[derive(Clone, Debug)]
pub struct EvalOptions<'a> {
    pub batch_size: usize,
    pub loss: Option<&'a LossConfig>,
    pub class_weights: Option<ClassWeights>,
    /// Number of sample triples to keep (the first ones seen).
    pub samples: usize,
    pub pr_thresholds: usize,
}

impl Default for EvalOptions<'_> {
    fn default() -> Self {
        Self { batch_size: 8, loss: None, class_weights: None, samples: 0, pr_thresholds: 101 }
    }
}

/// Micro-averaged metrics over `data` in evaluation mode.
pub fn evaluate(model: &dyn Segmenter, data: &[Patch], opts: &EvalOptions<'_>) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Invalid("cannot evaluate on an empty set".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Invalid("evaluation batch size must be at least 1".into()));
    }
    let mut counts = ConfusionCounts::default();
    let mut pr = match opts.pr_thresholds {
        0 => None,
        n => Some(PrAccumulator::new(default_thresholds(n))?),
    };
    let mut loss_sum = 0.0;
    let mut samples = Vec::new();
    for chunk in data.chunks(opts.batch_size) {
        let refs: Vec<&Patch> = chunk.iter().collect();
        let (x, target) = make_batch(&refs)?;
        let raw = model.predict_batch(&x)?;
        if let Some(loss) = opts.loss {
            let out = loss.evaluate(tensor_to_array4(&raw)?.view(), target.view(), opts.class_weights)?;
            loss_sum += out.value * chunk.len() as f64;
        }
        let probs = two_channel(&raw)?;
        let (n, _, h, w) = probs.dims4()?;
        let probs = Array4::from_shape_vec((n, 2, h, w), probs.into_data()).expect("dims checked");
        let pred = argmax_mask(&probs);
        counts += crate::metrics::confusion_nd(pred.view().into_dyn(), target.view().into_dyn())?;
        if let Some(acc) = pr.as_mut() {
            acc.add(probs.index_axis(Axis(1), 1), target.view())?;
        }
        for (i, p) in chunk.iter().enumerate() {
            if samples.len() >= opts.samples {
                break;
            }
            samples.push(SampleTriple {
                image: p.image.clone(),
                target: target.index_axis(Axis(0), i).to_owned(),
                prediction: pred.index_axis(Axis(0), i).to_owned(),
            });
        }
    }
    let mut report = scores(counts);
    report.pr_points = pr.map(|a| a.points()).unwrap_or_default();
    Ok(Evaluation {
        report,
        mean_loss: opts.loss.map(|_| loss_sum / data.len() as f64),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    /// Returns the target of each patch, looked up by the image's first
    /// value.
    struct Oracle(Vec<Array2<u8>>);

    impl Segmenter for Oracle {
        fn predict_batch(&self, batch: &Tensor) -> Result<Tensor> {
            let (n, _, h, w) = batch.dims4()?;
            let mut out = Vec::new();
            for i in 0..n {
                let key = batch.data()[i * 3 * h * w] as usize;
                let m = &self.0[key];
                out.extend(m.iter().map(|&v| 1.0 - v as f32));
                out.extend(m.iter().map(|&v| v as f32));
            }
            Ok(Tensor::new(&[n, 2, h, w], out)?)
        }
    }

    struct Background;

    impl Segmenter for Background {
        fn predict_batch(&self, batch: &Tensor) -> Result<Tensor> {
            let (n, _, h, w) = batch.dims4()?;
            let plane = h * w;
            let mut out = Vec::new();
            for _ in 0..n {
                out.extend(std::iter::repeat_n(0.9, plane));
                out.extend(std::iter::repeat_n(0.1, plane));
            }
            Ok(Tensor::new(&[n, 2, h, w], out)?)
        }
    }

    fn set(n: usize) -> Vec<Patch> {
        (0..n)
            .map(|k| {
                let mask = Array2::from_shape_fn((8, 8), |(y, x)| ((y + x + k) % 3 == 0) as u8);
                Patch { image: Array3::from_elem((3, 8, 8), k as f32), mask: Some(mask) }
            })
            .collect()
    }

    #[test]
    fn oracle_scores_perfectly() {
        let data = set(5);
        let oracle = Oracle(data.iter().map(|p| p.mask.clone().unwrap()).collect());
        let opts = EvalOptions { batch_size: 2, samples: 3, ..Default::default() };
        let ev = evaluate(&oracle, &data, &opts).unwrap();
        assert_eq!(ev.report.accuracy, 1.0);
        assert_eq!(ev.report.iou, 1.0);
        assert_eq!(ev.samples.len(), 3);
        assert_eq!(ev.report.pr_points.len(), 101);
    }

    #[test]
    fn constant_background_matches_class_balance() {
        // Pixel counts of the two classes over the full labelled corpus.
        let (bg, fg) = (4.4e10f64, 7.1e8f64);
        let acc = bg / (bg + fg);
        assert!((acc - 0.984).abs() <= 0.001, "{acc}");
        // The same balance on a concrete set, reduced to 16 building pixels
        // per 1000.
        let mut mask = Array2::zeros((40, 25));
        for i in 0..16 {
            mask[[i, 0]] = 1;
        }
        let data = vec![Patch { image: Array3::zeros((3, 40, 25)), mask: Some(mask) }];
        let ev = evaluate(&Background, &data, &EvalOptions::default()).unwrap();
        assert!((ev.report.accuracy - 0.984).abs() < 1e-12);
        assert_eq!(ev.report.iou, 0.0);
    }

    #[test]
    fn evaluation_is_deterministic_and_needs_data() {
        let cfg = crate::models::ModelConfig { base_channels: 4, dropout_rate: 0.5, ..Default::default() };
        let model = crate::models::build_model(&cfg).unwrap();
        let data = set(3);
        let loss = LossConfig::default();
        let opts = EvalOptions { batch_size: 2, loss: Some(&loss), ..Default::default() };
        let a = evaluate(&model, &data, &opts).unwrap();
        let b = evaluate(&model, &data, &opts).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.mean_loss, b.mean_loss);
        assert!(evaluate(&model, &[], &opts).is_err());
    }
}
