//! Reassembly of per-tile rasters into a scene.

use ndarray::{s, Array2};

use crate::dataset::tiles::TileGrid;
use crate::{Error, Result};

/// Places `(index, tile)` pairs by index on the padded grid, then crops to
/// `(height, width)`. Tiles must be `tile_size` square; order is irrelevant.
pub fn stitch_tiles<T: Clone + Default>(
    tiles: &[(usize, Array2<T>)],
    grid: &TileGrid,
    height: usize,
    width: usize,
) -> Result<Array2<T>> {
    if !grid.covers(height, width) {
        return Err(Error::Invalid(format!("grid {grid:?} does not cover a {height}x{width} scene")));
    }
    let t = grid.tile_size;
    let mut slots: Vec<Option<&Array2<T>>> = vec![None; grid.len()];
    for (index, tile) in tiles {
        let slot = slots
            .get_mut(*index)
            .ok_or_else(|| Error::Invalid(format!("tile index {index} outside grid of {}", grid.len())))?;
        if slot.is_some() {
            return Err(Error::Invalid(format!("tile {index} supplied twice")));
        }
        if tile.dim() != (t, t) {
            return Err(Error::Shape(format!("tile {index} is {:?}, expected {t}x{t}", tile.dim())));
        }
        *slot = Some(tile);
    }
    if let Some(missing) = slots.iter().position(Option::is_none) {
        return Err(Error::Invalid(format!("missing tile {missing}")));
    }
    let (ph, pw) = grid.padded_size();
    let mut out = Array2::default((ph, pw));
    for (index, tile) in slots.into_iter().enumerate() {
        let (r0, c0) = grid.origin(index);
        out.slice_mut(s![r0..r0 + t, c0..c0 + t]).assign(tile.expect("checked above"));
    }
    Ok(out.slice(s![..height, ..width]).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::tiles::{tile_mask, PadPolicy};
    use rand::{Rng, SeedableRng};

    fn random_mask(h: usize, w: usize, seed: u64) -> Array2<u8> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| rng.random_range(0..2))
    }

    #[test]
    fn four_tiles_make_a_square_scene() {
        let grid = TileGrid::for_scene(1024, 1024, 512, PadPolicy::Zero, 512).unwrap();
        let tiles: Vec<_> = (0..4).map(|i| (i, Array2::from_elem((512, 512), i as u8))).collect();
        let out = stitch_tiles(&tiles, &grid, 1024, 1024).unwrap();
        assert_eq!(out.dim(), (1024, 1024));
        assert_eq!(out[[0, 600]], 1);
        assert_eq!(out[[600, 0]], 2);
    }

    #[test]
    fn uneven_scene_round_trips_in_any_order() {
        let mask = random_mask(37, 50, 3);
        for policy in [PadPolicy::Reflect, PadPolicy::Zero] {
            let grid = TileGrid::for_scene(37, 50, 16, policy, 16).unwrap();
            let mut tiles: Vec<_> = tile_mask(mask.view(), &grid).unwrap().into_iter().enumerate().collect();
            tiles.reverse();
            tiles.swap(0, 3);
            assert_eq!(stitch_tiles(&tiles, &grid, 37, 50).unwrap(), mask);
        }
    }

    #[test]
    fn missing_and_duplicate_tiles_are_named() {
        let grid = TileGrid::for_scene(8, 8, 4, PadPolicy::Zero, 4).unwrap();
        let t = Array2::<u8>::zeros((4, 4));
        let tiles = vec![(0, t.clone()), (1, t.clone()), (3, t.clone())];
        let err = stitch_tiles(&tiles, &grid, 8, 8).unwrap_err().to_string();
        assert!(err.contains("missing tile 2"), "{err}");
        let dup = vec![(0, t.clone()), (0, t.clone())];
        assert!(stitch_tiles(&dup, &grid, 8, 8).is_err());
        assert!(stitch_tiles(&[(9, t)], &grid, 8, 8).is_err());
    }
}
