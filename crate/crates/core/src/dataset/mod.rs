//! Dataset ingestion, augmentation, tiling, caching, class statistics and
//! splitting.

pub mod cache;
pub mod patch;
pub mod resize;
pub mod split;
pub mod staticmap;
pub mod stats;
pub mod synthetic;
pub mod tiles;

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A full-colour raster with its optional binary building mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    /// `(H, W, 3)` colour values.
    pub image: Array3<u8>,
    /// `(H, W)` with values in {0, 1}.
    pub mask: Option<Array2<u8>>,
    pub city: String,
    pub scene_id: String,
    pub source_path: PathBuf,
}

impl ImageSample {
    pub fn new(image: Array3<u8>, mask: Option<Array2<u8>>, city: &str, scene_id: &str) -> Result<Self> {
        let (h, w, c) = image.dim();
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 colour channels, got {c}")));
        }
        if let Some(m) = &mask {
            if m.dim() != (h, w) {
                return Err(Error::Shape(format!("image {h}x{w} vs mask {:?}", m.dim())));
            }
            if m.iter().any(|&v| v > 1) {
                return Err(Error::Invalid("mask values must be 0 or 1".into()));
            }
        }
        Ok(Self {
            image,
            mask,
            city: city.to_string(),
            scene_id: scene_id.to_string(),
            source_path: PathBuf::new(),
        })
    }

    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }
}

/// An indexed scene on disk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleDescriptor {
    pub scene_id: String,
    pub city: String,
    pub image_path: PathBuf,
    pub mask_path: Option<PathBuf>,
    pub height: usize,
    pub width: usize,
}

impl SampleDescriptor {
    /// Scenes without a mask can only be predicted on.
    pub fn test_only(&self) -> bool {
        self.mask_path.is_none()
    }

    pub fn load(&self) -> Result<ImageSample> {
        let image = read_rgb(&self.image_path)?;
        let mask = self.mask_path.as_deref().map(read_mask).transpose()?;
        let mut s = ImageSample::new(image, mask, &self.city, &self.scene_id)?;
        s.source_path = self.image_path.clone();
        Ok(s)
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Rejection {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub descriptors: Vec<SampleDescriptor>,
    pub rejected: Vec<Rejection>,
}

const IMAGE_EXTENSIONS: [&str; 4] = ["tif", "tiff", "png", "PNG"];

/// City prefix of a scene stem, e.g. `austin12` -> `austin`.
pub fn city_of(stem: &str) -> String {
    let trimmed = stem.trim_end_matches(|c: char| c.is_ascii_digit() || c == '_' || c == '-');
    if trimmed.is_empty() {
        stem.to_string()
    } else {
        trimmed.to_string()
    }
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ok = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e));
        if ok && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

/// Indexes `<root>/images` against `<root>/gt`, pairing files by stem.
/// Pairs whose dimensions disagree are rejected and reported.
pub fn load_dataset_index(root: &Path) -> Result<DatasetIndex> {
    let images_dir = root.join("images");
    if !images_dir.is_dir() {
        return Err(Error::Dataset(format!("missing directory {}", images_dir.display())));
    }
    let gt_dir = root.join("gt");
    if !gt_dir.is_dir() {
        return Err(Error::Dataset(format!("missing directory {}", gt_dir.display())));
    }
    let masks = list_images(&gt_dir)?;
    let mut index = DatasetIndex::default();
    for image_path in list_images(&images_dir)? {
        let scene_id = stem(&image_path);
        let (w, h) = match image::image_dimensions(&image_path) {
            Ok(d) => (d.0 as usize, d.1 as usize),
            Err(e) => {
                index.rejected.push(Rejection { path: image_path, reason: e.to_string() });
                continue;
            }
        };
        let mask_path = masks.iter().find(|m| stem(m) == scene_id).cloned();
        if let Some(mp) = &mask_path {
            match image::image_dimensions(mp) {
                Ok((mw, mh)) if (mw as usize, mh as usize) == (w, h) => {}
                Ok((mw, mh)) => {
                    index.rejected.push(Rejection {
                        path: image_path,
                        reason: format!("image is {w}x{h} but mask is {mw}x{mh}"),
                    });
                    continue;
                }
                Err(e) => {
                    index.rejected.push(Rejection { path: mp.clone(), reason: e.to_string() });
                    continue;
                }
            }
        }
        index.descriptors.push(SampleDescriptor {
            city: city_of(&scene_id),
            scene_id,
            image_path,
            mask_path,
            height: h,
            width: w,
        });
    }
    if index.descriptors.is_empty() && index.rejected.is_empty() {
        log::warn!("dataset root {} contains no images", root.display());
    }
    for r in &index.rejected {
        log::warn!("rejected {}: {}", r.path.display(), r.reason);
    }
    Ok(index)
}

pub fn read_rgb(path: &Path) -> Result<Array3<u8>> {
    let img = image::open(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
        .into_rgb8();
    let (w, h) = img.dimensions();
    Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw()).map_err(|e| Error::Shape(e.to_string()))
}

/// Reads a mask; any nonzero value marks a building.
pub fn read_mask(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
        .into_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| (v > 0) as u8).collect();
    Array2::from_shape_vec((h as usize, w as usize), data).map_err(|e| Error::Shape(e.to_string()))
}

pub fn write_rgb(path: &Path, image: &Array3<u8>) -> Result<()> {
    let (h, w, _) = image.dim();
    let data: Vec<u8> = image.iter().copied().collect();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, data)
        .ok_or_else(|| Error::Shape("rgb buffer size".into()))?;
    buf.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Writes a binary mask as 0/255 grayscale.
pub fn write_mask(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let data: Vec<u8> = mask.iter().map(|&v| if v > 0 { 255 } else { 0 }).collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, data)
        .ok_or_else(|| Error::Shape("mask buffer size".into()))?;
    buf.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_pair(root: &Path, name: &str, (h, w): (usize, usize), (mh, mw): (usize, usize)) {
        std::fs::create_dir_all(root.join("images")).unwrap();
        std::fs::create_dir_all(root.join("gt")).unwrap();
        write_rgb(&root.join("images").join(format!("{name}.png")), &Array3::zeros((h, w, 3))).unwrap();
        write_mask(&root.join("gt").join(format!("{name}.png")), &Array2::zeros((mh, mw))).unwrap();
    }

    #[test]
    fn missing_directory_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset_index(dir.path()).is_err());
    }

    #[test]
    fn empty_root_gives_empty_index() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        std::fs::create_dir_all(dir.path().join("gt")).unwrap();
        let idx = load_dataset_index(dir.path()).unwrap();
        assert!(idx.descriptors.is_empty() && idx.rejected.is_empty());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "vienna3", (50, 50), (49, 50));
        let idx = load_dataset_index(dir.path()).unwrap();
        assert_eq!(idx.descriptors.len(), 0);
        assert_eq!(idx.rejected.len(), 1);
    }

    #[test]
    fn pairs_and_test_only_images() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "austin1", (8, 6), (8, 6));
        write_pair(dir.path(), "tyrol-w2", (4, 4), (4, 4));
        write_rgb(&dir.path().join("images/bellingham1.png"), &Array3::zeros((4, 4, 3))).unwrap();
        let idx = load_dataset_index(dir.path()).unwrap();
        assert_eq!(idx.descriptors.len(), 3);
        let austin = idx.descriptors.iter().find(|d| d.scene_id == "austin1").unwrap();
        assert_eq!((austin.city.as_str(), austin.height, austin.width), ("austin", 8, 6));
        assert!(!austin.test_only());
        let b = idx.descriptors.iter().find(|d| d.scene_id == "bellingham1").unwrap();
        assert!(b.test_only());
        let tyrol = idx.descriptors.iter().find(|d| d.scene_id == "tyrol-w2").unwrap();
        assert_eq!(tyrol.city, "tyrol-w");
        let s = austin.load().unwrap();
        assert_eq!(s.mask.unwrap().dim(), (8, 6));
    }

    #[test]
    fn sample_rejects_mismatched_mask() {
        assert!(ImageSample::new(Array3::zeros((4, 4, 3)), Some(Array2::zeros((3, 4))), "a", "a1").is_err());
        assert!(ImageSample::new(Array3::zeros((4, 4, 3)), Some(Array2::from_elem((4, 4), 2)), "a", "a1").is_err());
    }
}
