//! Random-crop patch augmentation with paired image/mask transforms.

use ndarray::{s, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::resize::{bilinear_chw, nearest_2d};
use super::ImageSample;
use crate::{Error, Result};

/// Every random choice behind one augmented patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchSpec {
    /// `(row, col)` of the crop's top-left pixel.
    pub origin: (usize, usize),
    pub crop_width: usize,
    pub crop_height: usize,
    pub hflip: bool,
    pub vflip: bool,
    pub output_size: usize,
}

impl PatchSpec {
    /// Checks the crop against an `h x w` source.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        let cw = self.crop_width as f64;
        let ch = self.crop_height as f64;
        if self.crop_width == 0 || self.crop_height == 0 || self.output_size == 0 {
            return Err(Error::Invalid(format!("patch sizes must be positive: {self:?}")));
        }
        if ch < 0.9 * cw - 1e-9 || ch > 1.1 * cw + 1e-9 {
            return Err(Error::Invalid(format!(
                "crop height {} outside 10% band of crop width {}",
                self.crop_height, self.crop_width
            )));
        }
        if self.origin.0 + self.crop_height > h {
            return Err(Error::Invalid(format!(
                "crop bottom {} exceeds image height {h}",
                self.origin.0 + self.crop_height
            )));
        }
        if self.origin.1 + self.crop_width > w {
            return Err(Error::Invalid(format!(
                "crop right edge {} exceeds image width {w}",
                self.origin.1 + self.crop_width
            )));
        }
        Ok(())
    }
}

/// Per-channel normalisation `(x * scale - mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub scale: f32,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    /// Statistics of the usual ImageNet pretraining corpus, on a [0, 1] scale.
    fn default() -> Self {
        Self {
            scale: 1.0 / 255.0,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|s| !(*s > 0.0)) || !(self.scale > 0.0) {
            return Err(Error::Config(format!("normalisation needs positive std and scale: {self:?}")));
        }
        Ok(())
    }

    /// Normalises a `(3, H, W)` array of raw colour values in place.
    pub fn apply(&self, chw: &mut Array3<f32>) {
        for (c, mut plane) in chw.axis_iter_mut(Axis(0)).enumerate() {
            let (m, sd) = (self.mean[c], self.std[c]);
            plane.mapv_inplace(|v| (v * self.scale - m) / sd);
        }
    }

    /// Maps a normalised `(3, H, W)` array back to an `(H, W, 3)` colour
    /// raster, saturating to `0..=255`.
    pub fn to_rgb(&self, chw: ndarray::ArrayView3<f32>) -> ndarray::Array3<u8> {
        let (_, h, w) = chw.dim();
        ndarray::Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            let raw = (chw[[c, y, x]] * self.std[c] + self.mean[c]) / self.scale;
            raw.round().clamp(0.0, 255.0) as u8
        })
    }

    /// Stable byte encoding for cache keys.
    pub fn key_bytes(&self) -> Vec<u8> {
        std::iter::once(self.scale)
            .chain(self.mean)
            .chain(self.std)
            .flat_map(f32::to_le_bytes)
            .collect()
    }
}

/// An image patch `(3, S, S)` and its mask `(S, S)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub image: Array3<f32>,
    pub mask: Option<Array2<u8>>,
}

/// `(H, W, 3)` colour raster to `(3, H, W)` floats.
pub fn hwc_to_chw(image: ndarray::ArrayView3<u8>) -> Array3<f32> {
    image.permuted_axes([2, 0, 1]).mapv(f32::from)
}

pub fn sample_patch(sample: &ImageSample, spec: &PatchSpec, norm: &Normalization) -> Result<Patch> {
    spec.validate(sample.height(), sample.width())?;
    let (r0, c0) = spec.origin;
    let (r1, c1) = (r0 + spec.crop_height, c0 + spec.crop_width);
    let n = spec.output_size;
    let crop = hwc_to_chw(sample.image.slice(s![r0..r1, c0..c1, ..]));
    let mut image = bilinear_chw(crop.view(), n, n);
    let mut mask = sample
        .mask
        .as_ref()
        .map(|m| nearest_2d(m.slice(s![r0..r1, c0..c1]), n, n));
    if spec.hflip {
        image.invert_axis(Axis(2));
        if let Some(m) = mask.as_mut() {
            m.invert_axis(Axis(1));
        }
    }
    if spec.vflip {
        image.invert_axis(Axis(1));
        if let Some(m) = mask.as_mut() {
            m.invert_axis(Axis(0));
        }
    }
    let mut image = image.as_standard_layout().into_owned();
    norm.apply(&mut image);
    let mask = mask.map(|m| m.as_standard_layout().into_owned());
    Ok(Patch { image, mask })
}

/// Ranges the random patch sampler draws from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchSampler {
    pub min_width: usize,
    pub max_width: usize,
    pub output_size: usize,
}

impl Default for PatchSampler {
    fn default() -> Self {
        Self {
            min_width: 100,
            max_width: 500,
            output_size: 224,
        }
    }
}

/// Draws `count` specs for an `h x w` image. For each spec the order of
/// draws is width, height, origin row, origin column, hflip, vflip.
pub fn generate_patchset(h: usize, w: usize, count: usize, seed: u64, sampler: &PatchSampler) -> Result<Vec<PatchSpec>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if h == 0 || w == 0 {
        return Err(Error::Invalid("cannot sample patches from an empty image".into()));
    }
    if sampler.min_width == 0 || sampler.min_width > sampler.max_width {
        return Err(Error::Config(format!("invalid patch width range {sampler:?}")));
    }
    // Largest width for which some height in the 10% band still fits.
    let fit = w.min((h as f64 / 0.9).floor() as usize).max(1);
    let hi = sampler.max_width.min(fit);
    let lo = sampler.min_width.min(hi);
    if hi < sampler.max_width {
        log::warn!(
            "image {h}x{w} is smaller than the patch width range; widths truncated to [{lo}, {hi}]"
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut specs = Vec::with_capacity(count);
    for _ in 0..count {
        let cw = rng.random_range(lo..=hi);
        let h_lo = ((0.9 * cw as f64).ceil() as usize).max(1);
        let h_hi = ((1.1 * cw as f64).floor() as usize).min(h);
        let ch = rng.random_range(h_lo..=h_hi.max(h_lo));
        let row = rng.random_range(0..=h - ch);
        let col = rng.random_range(0..=w - cw);
        let hflip = rng.random_bool(0.5);
        let vflip = rng.random_bool(0.5);
        specs.push(PatchSpec {
            origin: (row, col),
            crop_width: cw,
            crop_height: ch,
            hflip,
            vflip,
            output_size: sampler.output_size,
        });
    }
    Ok(specs)
}
