//! Glue between stages: cached sample preparation, train/val assembly and
//! whole-scene prediction by tiling.

use std::path::PathBuf;

use ndarray::{s, Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::cache::{Cache, CacheKey};
use crate::dataset::patch::{generate_patchset, sample_patch, Normalization, Patch, PatchSampler};
use crate::dataset::resize::bilinear_chw;
use crate::dataset::split::{split_indices, Located, SplitSpec, SplitUnit};
use crate::dataset::stats::{count_pixels, ClassStats};
use crate::dataset::tiles::{tile_at, PadPolicy, TileGrid};
use crate::dataset::{load_dataset_index, read_mask, DatasetIndex, ImageSample, SampleDescriptor};
use crate::fusion::{stitch_tiles, ProbabilityMask};
use crate::training::evaluate::{two_channel, Segmenter};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Random crops with flips, resized to `sampler.output_size`.
    #[default]
    Patches,
    /// Contiguous non-overlapping tiles resized to `resize_to`.
    Tiles,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset root holding `images/` and `gt/`.
    pub root: PathBuf,
    pub cache_dir: PathBuf,
    pub mode: SampleMode,
    pub patches_per_scene: usize,
    pub sampler: PatchSampler,
    pub tile_size: usize,
    pub resize_to: usize,
    pub pad: PadPolicy,
    pub normalization: Normalization,
    pub split: SplitSpec,
    /// Effective-number beta for class statistics.
    pub class_beta: f64,
    /// Seed of the patch sampler.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            cache_dir: PathBuf::from("cache"),
            mode: SampleMode::Patches,
            patches_per_scene: 350,
            sampler: PatchSampler::default(),
            tile_size: 512,
            resize_to: 512,
            pad: PadPolicy::Reflect,
            normalization: Normalization::default(),
            split: SplitSpec::default(),
            class_beta: 0.999_999_999,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.mode == SampleMode::Patches {
            if self.patches_per_scene == 0 {
                p.push("data.patches_per_scene must be >= 1".into());
            }
            let s = &self.sampler;
            if s.min_width == 0 || s.min_width > s.max_width || s.output_size == 0 {
                p.push(format!("data.sampler is invalid: {s:?}"));
            }
        }
        if self.tile_size == 0 || self.resize_to == 0 {
            p.push("data.tile_size and data.resize_to must be >= 1".into());
        }
        if let Err(e) = self.normalization.validate() {
            p.push(format!("data.normalization: {e}"));
        }
        if let Err(e) = self.split.validate() {
            p.push(format!("data.split: {e}"));
        }
        if !(0.0..1.0).contains(&self.class_beta) {
            p.push(format!("data.class_beta must lie in [0, 1), got {}", self.class_beta));
        }
        p
    }

    /// Side length of the network inputs this configuration produces.
    pub fn input_size(&self) -> usize {
        match self.mode {
            SampleMode::Patches => self.sampler.output_size,
            SampleMode::Tiles => self.resize_to,
        }
    }

    fn scene_seed(&self, scene_id: &str) -> u64 {
        let d = Sha256::digest(scene_id.as_bytes());
        self.seed ^ u64::from_le_bytes(d[..8].try_into().unwrap())
    }

    /// Cache keys of every item the scene contributes.
    fn keys(&self, d: &SampleDescriptor) -> Result<Vec<(CacheKey, ItemRecipe)>> {
        match self.mode {
            SampleMode::Patches => {
                let specs = generate_patchset(d.height, d.width, self.patches_per_scene, self.scene_seed(&d.scene_id), &self.sampler)?;
                specs
                    .into_iter()
                    .map(|spec| Ok((CacheKey::for_patch(&d.scene_id, &spec, &self.normalization)?, ItemRecipe::Patch(spec))))
                    .collect()
            }
            SampleMode::Tiles => {
                let grid = TileGrid::for_scene(d.height, d.width, self.tile_size, self.pad, self.resize_to)?;
                (0..grid.len())
                    .map(|i| Ok((CacheKey::for_tile(&d.scene_id, &grid, i, &self.normalization)?, ItemRecipe::Tile(grid, i))))
                    .collect()
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum ItemRecipe {
    Patch(crate::dataset::patch::PatchSpec),
    Tile(TileGrid, usize),
}

fn build_item(sample: &ImageSample, recipe: &ItemRecipe, norm: &Normalization) -> Result<Patch> {
    match recipe {
        ItemRecipe::Patch(spec) => sample_patch(sample, spec, norm),
        ItemRecipe::Tile(grid, i) => {
            let t = tile_at(sample, grid, *i)?;
            let mut image = t.image;
            norm.apply(&mut image);
            Ok(Patch { image, mask: t.mask })
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SceneFailure {
    pub scene: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PrepareReport {
    pub scenes: usize,
    pub entries: usize,
    pub new_entries: usize,
    pub failed: Vec<SceneFailure>,
}

/// Fills the cache with every item of every indexed scene. Scenes whose
/// items are all cached are not read. Per-scene failures are collected.
pub fn prepare(cfg: &DataConfig) -> Result<PrepareReport> {
    let index = load_dataset_index(&cfg.root)?;
    prepare_index(cfg, &index)
}

pub fn prepare_index(cfg: &DataConfig, index: &DatasetIndex) -> Result<PrepareReport> {
    let cache = Cache::new(&cfg.cache_dir);
    let mut report = PrepareReport {
        failed: index
            .rejected
            .iter()
            .map(|r| SceneFailure { scene: r.path.display().to_string(), reason: r.reason.clone() })
            .collect(),
        ..Default::default()
    };
    for d in &index.descriptors {
        report.scenes += 1;
        match prepare_scene(cfg, &cache, d) {
            Ok((total, new)) => {
                report.entries += total;
                report.new_entries += new;
            }
            Err(e) => report.failed.push(SceneFailure { scene: d.scene_id.clone(), reason: e.to_string() }),
        }
    }
    Ok(report)
}

fn prepare_scene(cfg: &DataConfig, cache: &Cache, d: &SampleDescriptor) -> Result<(usize, usize)> {
    let keys = cfg.keys(d)?;
    let mut missing = Vec::new();
    for (k, r) in &keys {
        if !cache.contains(k)? {
            missing.push((*k, *r));
        }
    }
    if !missing.is_empty() {
        let sample = d.load()?;
        for (k, r) in &missing {
            cache.put_patch(k, &build_item(&sample, r, &cfg.normalization)?)?;
        }
    }
    Ok((keys.len(), missing.len()))
}

/// All items of one scene, from the cache where possible.
pub fn scene_items(cfg: &DataConfig, cache: &Cache, d: &SampleDescriptor) -> Result<Vec<Patch>> {
    let keys = cfg.keys(d)?;
    let mut sample: Option<ImageSample> = None;
    let mut out = Vec::with_capacity(keys.len());
    for (k, r) in &keys {
        if let Some(p) = cache.get_patch(k)? {
            out.push(p);
            continue;
        }
        if sample.is_none() {
            sample = Some(d.load()?);
        }
        let p = build_item(sample.as_ref().expect("loaded above"), r, &cfg.normalization)?;
        cache.put_patch(k, &p)?;
        out.push(p);
    }
    Ok(out)
}

/// Training and validation items with their scene membership.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub train: Vec<Patch>,
    pub val: Vec<Patch>,
    pub train_scenes: Vec<String>,
    pub val_scenes: Vec<String>,
    /// Class statistics of the training scenes.
    pub class_stats: ClassStats,
}

struct Tagged<'a>(&'a str);

impl Located for Tagged<'_> {
    fn city(&self) -> &str {
        self.0
    }
}

/// Splits the labelled scenes (or, with [`SplitUnit::Patch`], their items)
/// into training and validation sets.
pub fn load_split(cfg: &DataConfig, index: &DatasetIndex) -> Result<SplitData> {
    let cache = Cache::new(&cfg.cache_dir);
    let labelled: Vec<&SampleDescriptor> = index.descriptors.iter().filter(|d| !d.test_only()).collect();
    if labelled.is_empty() {
        return Err(Error::Dataset(format!("no labelled scenes under {}", cfg.root.display())));
    }
    let mut data = SplitData {
        train: Vec::new(),
        val: Vec::new(),
        train_scenes: Vec::new(),
        val_scenes: Vec::new(),
        class_stats: ClassStats::from_counts([1, 0], cfg.class_beta)?,
    };
    let mut counts = [0u64; 2];
    let mut add_counts = |d: &SampleDescriptor| -> Result<()> {
        let m = read_mask(d.mask_path.as_deref().expect("labelled"))?;
        let c = count_pixels(m.view());
        counts[0] += c[0];
        counts[1] += c[1];
        Ok(())
    };
    if cfg.split.unit == SplitUnit::Patch && cfg.split.mode == crate::dataset::split::SplitMode::RandomRatio {
        let mut items = Vec::new();
        for d in &labelled {
            for p in scene_items(cfg, &cache, d)? {
                items.push((d.city.as_str(), p));
            }
            add_counts(d)?;
            data.train_scenes.push(d.scene_id.clone());
            data.val_scenes.push(d.scene_id.clone());
        }
        let tags: Vec<Tagged> = items.iter().map(|(c, _)| Tagged(c)).collect();
        let (tr, va) = split_indices(&tags, &cfg.split)?;
        let mut items: Vec<Option<Patch>> = items.into_iter().map(|(_, p)| Some(p)).collect();
        data.train = tr.iter().map(|&i| items[i].take().expect("disjoint")).collect();
        data.val = va.iter().map(|&i| items[i].take().expect("disjoint")).collect();
    } else {
        let owned: Vec<SampleDescriptor> = labelled.iter().map(|d| (*d).clone()).collect();
        let (tr, va) = split_indices(&owned, &cfg.split)?;
        for i in tr {
            data.train.extend(scene_items(cfg, &cache, &owned[i])?);
            data.train_scenes.push(owned[i].scene_id.clone());
            add_counts(&owned[i])?;
        }
        for i in va {
            data.val.extend(scene_items(cfg, &cache, &owned[i])?);
            data.val_scenes.push(owned[i].scene_id.clone());
        }
    }
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Dataset(format!(
            "split left {} training and {} validation items; both must be non-empty",
            data.train.len(),
            data.val.len()
        )));
    }
    data.class_stats = ClassStats::from_counts(counts, cfg.class_beta)?;
    Ok(data)
}

/// Tiling used at prediction time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictTiling {
    pub tile_size: usize,
    pub resize_to: usize,
    pub pad: PadPolicy,
    pub batch_size: usize,
}

impl PredictTiling {
    pub fn from_data(cfg: &DataConfig) -> Self {
        Self { tile_size: cfg.tile_size, resize_to: cfg.resize_to, pad: cfg.pad, batch_size: 4 }
    }
}

/// Tiles an `(H, W, 3)` scene, predicts every tile, resizes tile
/// probabilities back to tile size (bilinear), stitches and crops to the
/// scene size.
pub fn predict_scene(
    model: &dyn Segmenter,
    image: ArrayView3<u8>,
    tiling: &PredictTiling,
    norm: &Normalization,
) -> Result<ProbabilityMask> {
    let (h, w, _) = image.dim();
    let grid = TileGrid::for_scene(h, w, tiling.tile_size, tiling.pad, tiling.resize_to)?;
    let sample = ImageSample::new(image.to_owned(), None, "", "")?;
    let t = tiling.tile_size;
    let r = tiling.resize_to;
    let mut bg_tiles = Vec::with_capacity(grid.len());
    let mut fg_tiles = Vec::with_capacity(grid.len());
    let indices: Vec<usize> = (0..grid.len()).collect();
    for chunk in indices.chunks(tiling.batch_size.max(1)) {
        let mut data = Vec::with_capacity(chunk.len() * 3 * r * r);
        for &i in chunk {
            let mut img = tile_at(&sample, &grid, i)?.image;
            norm.apply(&mut img);
            data.extend(img.iter());
        }
        let batch = footprint_grad::Tensor::new(&[chunk.len(), 3, r, r], data)?;
        let probs = two_channel(&model.predict_batch(&batch)?)?;
        let (_, _, ph, pw) = probs.dims4()?;
        if (ph, pw) != (r, r) {
            return Err(Error::Shape(format!("model returned {ph}x{pw} for {r}x{r} tiles")));
        }
        let all = Array3::from_shape_vec((chunk.len() * 2, r, r), probs.into_data()).expect("dims checked");
        for (k, &i) in chunk.iter().enumerate() {
            let p = all.slice(s![2 * k..2 * k + 2, .., ..]);
            let p = if r == t { p.to_owned() } else { bilinear_chw(p, t, t) };
            bg_tiles.push((i, p.slice(s![0, .., ..]).to_owned()));
            fg_tiles.push((i, p.slice(s![1, .., ..]).to_owned()));
        }
    }
    let bg: Array2<f32> = stitch_tiles(&bg_tiles, &grid, h, w)?;
    let fg: Array2<f32> = stitch_tiles(&fg_tiles, &grid, h, w)?;
    let mut out = Array3::zeros((2, h, w));
    out.slice_mut(s![0, .., ..]).assign(&bg);
    out.slice_mut(s![1, .., ..]).assign(&fg);
    ProbabilityMask::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic::{generate_corpus, write_corpus, SyntheticConfig};
    use footprint_grad::Tensor;
    use std::path::Path;

    fn corpus(dir: &Path, n: usize) -> DataConfig {
        let cfg = SyntheticConfig { size: 48, ..Default::default() };
        write_corpus(&dir.join("data"), &generate_corpus(&cfg, n, 1).unwrap()).unwrap();
        DataConfig {
            root: dir.join("data"),
            cache_dir: dir.join("cache"),
            patches_per_scene: 10,
            sampler: PatchSampler { min_width: 24, max_width: 40, output_size: 32 },
            tile_size: 16,
            resize_to: 32,
            ..Default::default()
        }
    }

    #[test]
    fn prepare_counts_and_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = corpus(dir.path(), 2);
        let first = prepare(&cfg).unwrap();
        assert_eq!((first.entries, first.new_entries), (20, 20));
        assert!(first.failed.is_empty());
        let again = prepare(&cfg).unwrap();
        assert_eq!(again.new_entries, 0);
        assert_eq!(Cache::new(&cfg.cache_dir).len(), 20);
        let tiles = DataConfig { mode: SampleMode::Tiles, ..cfg };
        let t = prepare(&tiles).unwrap();
        assert_eq!(t.entries, 2 * 9);
    }

    #[test]
    fn split_is_by_scene_and_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = corpus(dir.path(), 5);
        let index = load_dataset_index(&cfg.root).unwrap();
        let a = load_split(&cfg, &index).unwrap();
        let b = load_split(&cfg, &index).unwrap();
        assert_eq!(a.train_scenes, b.train_scenes);
        assert_eq!((a.train_scenes.len(), a.val_scenes.len()), (4, 1));
        assert!(a.val_scenes.iter().all(|s| !a.train_scenes.contains(s)));
        assert_eq!(a.train.len(), 40);
        assert_eq!(a.train[3], b.train[3]);
        assert!(a.class_stats.pixel_count[1] > 0);
    }

    /// Returns `(1 - g, g)` with `g` the first input channel squashed.
    struct Echo;

    impl Segmenter for Echo {
        fn predict_batch(&self, batch: &Tensor) -> Result<Tensor> {
            let (n, _, h, w) = batch.dims4()?;
            let plane = h * w;
            let mut out = Vec::new();
            for i in 0..n {
                let c0 = &batch.data()[i * 3 * plane..i * 3 * plane + plane];
                let g: Vec<f32> = c0.iter().map(|&v| (v / 255.0).clamp(0.0, 1.0)).collect();
                out.extend(g.iter().map(|v| 1.0 - v));
                out.extend(g);
            }
            Ok(Tensor::new(&[n, 2, h, w], out)?)
        }
    }

    #[test]
    fn prediction_keeps_the_scene_size() {
        let img = Array3::from_shape_fn((37, 45, 3), |(y, x, _)| ((y * 5 + x * 3) % 256) as u8);
        let tiling = PredictTiling { tile_size: 16, resize_to: 16, pad: PadPolicy::Reflect, batch_size: 3 };
        let p = predict_scene(&Echo, img.view(), &tiling, &Normalization::identity()).unwrap();
        assert_eq!((p.height(), p.width()), (37, 45));
        // Without resizing the stitched output is the per-pixel echo.
        for ((y, x), &v) in p.building().indexed_iter() {
            assert!((v - img[[y, x, 0]] as f32 / 255.0).abs() < 1e-6);
        }
        let resized = PredictTiling { resize_to: 32, ..tiling };
        let q = predict_scene(&Echo, img.view(), &resized, &Normalization::identity()).unwrap();
        assert_eq!((q.height(), q.width()), (37, 45));
        let again = predict_scene(&Echo, img.view(), &resized, &Normalization::identity()).unwrap();
        assert_eq!(q, again);
    }
}
