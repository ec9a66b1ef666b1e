//! Fixed-grid tiling of whole scenes.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use super::patch::hwc_to_chw;
use super::resize::{bilinear_chw, nearest_2d};
use super::ImageSample;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadPolicy {
    Reflect,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileGrid {
    pub tile_size: usize,
    pub pad_policy: PadPolicy,
    pub rows: usize,
    pub cols: usize,
    pub resize_to: usize,
}

impl TileGrid {
    /// Smallest grid covering an `h x w` scene.
    pub fn for_scene(h: usize, w: usize, tile_size: usize, pad_policy: PadPolicy, resize_to: usize) -> Result<Self> {
        if tile_size == 0 || resize_to == 0 {
            return Err(Error::Invalid("tile_size and resize_to must be at least 1".into()));
        }
        if h == 0 || w == 0 {
            return Err(Error::Invalid("cannot tile an empty scene".into()));
        }
        Ok(Self {
            tile_size,
            pad_policy,
            rows: h.div_ceil(tile_size),
            cols: w.div_ceil(tile_size),
            resize_to,
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn padded_size(&self) -> (usize, usize) {
        (self.rows * self.tile_size, self.cols * self.tile_size)
    }

    /// Top-left pixel of tile `index` (row-major) in padded coordinates.
    pub fn origin(&self, index: usize) -> (usize, usize) {
        ((index / self.cols) * self.tile_size, (index % self.cols) * self.tile_size)
    }

    pub fn covers(&self, h: usize, w: usize) -> bool {
        let (ph, pw) = self.padded_size();
        ph >= h && pw >= w
    }
}

/// Mirror index into `[0, n)` without repeating the edge sample
/// (`.. 2 1 | 0 1 2 .. n-1 | n-2 ..`), periodic for any offset.
pub fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let k = i % period;
    if k < n {
        k
    } else {
        period - k
    }
}

fn source(i: usize, n: usize, policy: PadPolicy) -> Option<usize> {
    if i < n {
        Some(i)
    } else {
        match policy {
            PadPolicy::Reflect => Some(reflect_index(i, n)),
            PadPolicy::Zero => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub index: usize,
    /// `(3, R, R)` raw colour values, `R = resize_to`.
    pub image: Array3<f32>,
    pub mask: Option<Array2<u8>>,
}

fn extract_2d<T: Copy + Default>(src: ArrayView2<T>, grid: &TileGrid, index: usize) -> Array2<T> {
    let (h, w) = src.dim();
    let (r0, c0) = grid.origin(index);
    let t = grid.tile_size;
    if r0 + t <= h && c0 + t <= w {
        return src.slice(s![r0..r0 + t, c0..c0 + t]).to_owned();
    }
    Array2::from_shape_fn((t, t), |(y, x)| {
        match (source(r0 + y, h, grid.pad_policy), source(c0 + x, w, grid.pad_policy)) {
            (Some(sy), Some(sx)) => src[[sy, sx]],
            _ => T::default(),
        }
    })
}

fn extract_chw(src: ArrayView3<u8>, grid: &TileGrid, index: usize) -> Array3<f32> {
    let (h, w, _) = src.dim();
    let (r0, c0) = grid.origin(index);
    let t = grid.tile_size;
    if r0 + t <= h && c0 + t <= w {
        return hwc_to_chw(src.slice(s![r0..r0 + t, c0..c0 + t, ..]));
    }
    Array3::from_shape_fn((3, t, t), |(c, y, x)| {
        match (source(r0 + y, h, grid.pad_policy), source(c0 + x, w, grid.pad_policy)) {
            (Some(sy), Some(sx)) => f32::from(src[[sy, sx, c]]),
            _ => 0.0,
        }
    })
}

/// Tiles a binary mask at full tile resolution.
pub fn tile_mask(mask: ArrayView2<u8>, grid: &TileGrid) -> Result<Vec<Array2<u8>>> {
    let (h, w) = mask.dim();
    if !grid.covers(h, w) {
        return Err(Error::Invalid(format!("grid {grid:?} does not cover a {h}x{w} scene")));
    }
    Ok((0..grid.len()).map(|i| extract_2d(mask, grid, i)).collect())
}

/// Cuts the padded scene into row-major tiles, each resized to
/// `grid.resize_to` (bilinear for the image, nearest for the mask).
pub fn tile_image(sample: &ImageSample, grid: &TileGrid) -> Result<Vec<Tile>> {
    (0..grid.len()).map(|i| tile_at(sample, grid, i)).collect()
}

/// A single tile, for streaming over large scenes.
pub fn tile_at(sample: &ImageSample, grid: &TileGrid, index: usize) -> Result<Tile> {
    let (h, w) = (sample.height(), sample.width());
    if !grid.covers(h, w) {
        return Err(Error::Invalid(format!("grid {grid:?} does not cover a {h}x{w} scene")));
    }
    if index >= grid.len() {
        return Err(Error::Invalid(format!("tile index {index} outside grid of {}", grid.len())));
    }
    let r = grid.resize_to;
    let image = bilinear_chw(extract_chw(sample.image.view(), grid, index).view(), r, r);
    let mask = sample
        .mask
        .as_ref()
        .map(|m| nearest_2d(extract_2d(m.view(), grid, index).view(), r, r));
    Ok(Tile { index, image, mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn grid_arithmetic() {
        let g = TileGrid::for_scene(5000, 5000, 512, PadPolicy::Reflect, 224).unwrap();
        assert_eq!((g.rows, g.cols, g.len()), (10, 10, 100));
        assert_eq!(g.padded_size(), (5120, 5120));
        let g = TileGrid::for_scene(1024, 1024, 512, PadPolicy::Reflect, 224).unwrap();
        assert_eq!(g.len(), 4);
        assert!(TileGrid::for_scene(10, 10, 0, PadPolicy::Zero, 4).is_err());
    }

    /// Every padded pixel is claimed by exactly one tile.
    #[test]
    fn coverage_count_oracle() {
        for (h, w, t) in [(5000, 5000, 512), (37, 53, 8), (8, 8, 8), (1, 9, 4)] {
            let g = TileGrid::for_scene(h, w, t, PadPolicy::Reflect, t).unwrap();
            let (ph, pw) = g.padded_size();
            let mut hits = vec![0u8; ph * pw];
            for i in 0..g.len() {
                let (r0, c0) = g.origin(i);
                for y in r0..r0 + t {
                    for x in c0..c0 + t {
                        hits[y * pw + x] += 1;
                    }
                }
            }
            assert!(hits.iter().all(|&c| c == 1));
            assert!(ph >= h && pw >= w && ph - h < t && pw - w < t);
        }
    }

    #[test]
    fn single_tile_identity() {
        let img = Array::from_shape_fn((16, 16, 3), |(y, x, c)| (y * 16 + x + c) as u8);
        let mask = Array::from_shape_fn((16, 16), |(y, x)| ((y ^ x) & 1) as u8);
        let s = ImageSample::new(img.clone(), Some(mask.clone()), "a", "a1").unwrap();
        let g = TileGrid::for_scene(16, 16, 16, PadPolicy::Reflect, 16).unwrap();
        let tiles = tile_image(&s, &g).unwrap();
        assert_eq!(tiles.len(), 1);
        assert_eq!(tiles[0].image, hwc_to_chw(img.view()));
        assert_eq!(tiles[0].mask.as_ref().unwrap(), &mask);
    }

    #[test]
    fn reflect_padding_mirrors_without_edge_repeat() {
        assert_eq!((0..9).map(|i| reflect_index(i, 4)).collect::<Vec<_>>(), vec![0, 1, 2, 3, 2, 1, 0, 1, 2]);
        let mask = ndarray::arr2(&[[0u8, 1, 1]]);
        let g = TileGrid::for_scene(1, 3, 4, PadPolicy::Reflect, 4).unwrap();
        let t = tile_mask(mask.view(), &g).unwrap();
        assert_eq!(t[0].row(0).to_vec(), vec![0, 1, 1, 1]);
        let g = TileGrid { pad_policy: PadPolicy::Zero, ..g };
        let t = tile_mask(mask.view(), &g).unwrap();
        assert_eq!(t[0].row(1).to_vec(), vec![0, 0, 0, 0]);
    }

    #[test]
    fn resized_tiles_have_requested_size_and_binary_masks() {
        let img = Array::from_shape_fn((40, 40, 3), |(y, x, _)| (y * 6 + x) as u8);
        let mask = Array::from_shape_fn((40, 40), |(y, x)| (y > x) as u8);
        let s = ImageSample::new(img, Some(mask), "a", "a1").unwrap();
        let g = TileGrid::for_scene(40, 40, 32, PadPolicy::Reflect, 12).unwrap();
        let tiles = tile_image(&s, &g).unwrap();
        assert_eq!(tiles.len(), 4);
        for (i, t) in tiles.iter().enumerate() {
            assert_eq!(t.index, i);
            assert_eq!(t.image.dim(), (3, 12, 12));
            assert!(t.mask.as_ref().unwrap().iter().all(|&v| v <= 1));
        }
    }
}
