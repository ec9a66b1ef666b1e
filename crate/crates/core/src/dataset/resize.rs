//! Resampling with half-pixel-centre alignment.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

/// Source coordinate of output index `i` when mapping `src` samples onto `dst`.
pub fn source_coord(i: usize, src: usize, dst: usize) -> f64 {
    (i as f64 + 0.5) * src as f64 / dst as f64 - 0.5
}

/// Nearest source index of output index `i`.
pub fn nearest_index(i: usize, src: usize, dst: usize) -> usize {
    let s = ((i as f64 + 0.5) * src as f64 / dst as f64).floor() as usize;
    s.min(src - 1)
}

fn taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    (0..dst)
        .map(|i| {
            let s = source_coord(i, src, dst).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

/// Bilinear resize of a `(C, H, W)` array. Same-size resizing is exact.
pub fn bilinear_chw(src: ArrayView3<f32>, oh: usize, ow: usize) -> Array3<f32> {
    let (c, h, w) = src.dim();
    if (h, w) == (oh, ow) {
        return src.to_owned();
    }
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut out = Array3::zeros((c, oh, ow));
    for ch in 0..c {
        let plane = src.index_axis(ndarray::Axis(0), ch);
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = plane[[y0, x0]] * (1.0 - fx) + plane[[y0, x1]] * fx;
                let bot = plane[[y1, x0]] * (1.0 - fx) + plane[[y1, x1]] * fx;
                out[[ch, y, x]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Nearest-neighbour resize; preserves the value set exactly.
pub fn nearest_2d<T: Copy>(src: ArrayView2<T>, oh: usize, ow: usize) -> Array2<T> {
    let (h, w) = src.dim();
    if (h, w) == (oh, ow) {
        return src.to_owned();
    }
    let ys: Vec<usize> = (0..oh).map(|y| nearest_index(y, h, oh)).collect();
    let xs: Vec<usize> = (0..ow).map(|x| nearest_index(x, w, ow)).collect();
    Array2::from_shape_fn((oh, ow), |(y, x)| src[[ys[y], xs[x]]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn same_size_is_identity() {
        let a = Array::from_shape_fn((2, 3, 4), |(c, y, x)| (c * 12 + y * 4 + x) as f32);
        assert_eq!(bilinear_chw(a.view(), 3, 4), a);
        let m = Array::from_shape_fn((3, 4), |(y, x)| ((y + x) % 2) as u8);
        assert_eq!(nearest_2d(m.view(), 3, 4), m);
    }

    #[test]
    fn constant_stays_constant() {
        let a = Array3::from_elem((1, 5, 7), 3.5f32);
        let r = bilinear_chw(a.view(), 11, 3);
        assert!(r.iter().all(|&v| (v - 3.5).abs() < 1e-6));
    }

    #[test]
    fn doubling_nearest_replicates() {
        let m = ndarray::arr2(&[[1u8, 0], [0, 1]]);
        let r = nearest_2d(m.view(), 4, 4);
        assert_eq!(r, ndarray::arr2(&[[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]]));
    }

    #[test]
    fn linear_ramp_is_reproduced_in_interior() {
        let a = Array::from_shape_fn((1, 1, 8), |(_, _, x)| x as f32);
        let r = bilinear_chw(a.view(), 1, 16);
        for x in 1..15 {
            let expect = source_coord(x, 8, 16) as f32;
            assert!((r[[0, 0, x]] - expect).abs() < 1e-6);
        }
    }
}
