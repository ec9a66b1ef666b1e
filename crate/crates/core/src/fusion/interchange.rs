//! Probability-mask files: a raw little-endian `f32` raster `(2, H, W)` plus
//! a JSON sidecar next to it (same stem, `.json`).

use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ensemble::ProbabilityMask;
use crate::{Error, Result};

pub const FORMAT: &str = "footprint-probability-f32le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSidecar {
    pub format: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub model_id: String,
    pub scene_id: String,
    /// SHA-256 of the raster bytes.
    pub sha256: String,
}

pub fn sidecar_path(raster: &Path) -> PathBuf {
    raster.with_extension("json")
}

/// Writes the raster and its sidecar; returns the sidecar.
pub fn write_probability_mask(path: &Path, mask: &ProbabilityMask, model_id: &str, scene_id: &str) -> Result<MaskSidecar> {
    let bytes: Vec<u8> = mask.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    let sidecar = MaskSidecar {
        format: FORMAT.into(),
        channels: 2,
        height: mask.height(),
        width: mask.width(),
        model_id: model_id.into(),
        scene_id: scene_id.into(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    std::fs::write(&side, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))?;
    Ok(sidecar)
}

pub fn read_probability_mask(path: &Path) -> Result<(ProbabilityMask, MaskSidecar)> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: MaskSidecar = serde_json::from_str(&text)?;
    if sidecar.format != FORMAT || sidecar.channels != 2 {
        return Err(Error::Invalid(format!("{}: unsupported raster format {}", side.display(), sidecar.format)));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = 4 * 2 * sidecar.height * sidecar.width;
    if bytes.len() != expected {
        return Err(Error::Shape(format!(
            "{}: {} bytes, sidecar promises {expected}",
            path.display(),
            bytes.len()
        )));
    }
    if hex::encode(Sha256::digest(&bytes)) != sidecar.sha256 {
        return Err(Error::Invalid(format!("{}: checksum mismatch", path.display())));
    }
    let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    let arr = Array3::from_shape_vec((2, sidecar.height, sidecar.width), data).expect("length checked");
    Ok((ProbabilityMask::new(arr)?, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = Array2::from_shape_fn((5, 7), |(y, x)| ((y * 7 + x) as f32 / 34.0).min(1.0));
        let mask = ProbabilityMask::from_building(p).unwrap();
        let path = dir.path().join("a/scene.prob.bin");
        let side = write_probability_mask(&path, &mask, "m1", "s1").unwrap();
        let (back, side2) = read_probability_mask(&path).unwrap();
        assert_eq!(back, mask);
        assert_eq!(side, side2);
        assert_eq!(side.height, 5);
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let mask = ProbabilityMask::from_building(Array2::from_elem((2, 2), 0.25)).unwrap();
        let path = dir.path().join("x.bin");
        write_probability_mask(&path, &mask, "m", "s").unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 1;
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_probability_mask(&path).is_err());
        std::fs::write(&path, &bytes[..4]).unwrap();
        assert!(read_probability_mask(&path).is_err());
    }
}
