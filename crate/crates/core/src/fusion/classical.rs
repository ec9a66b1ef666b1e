//! Classical segmentation used to refine network masks: Otsu thresholding,
//! marker-based watershed and SLIC superpixels.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const N4: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum ClassicalMethod {
    Otsu,
    /// Flooding of the Sobel gradient from markers; without markers the
    /// regional minima of the gradient seed the basins.
    Watershed,
    Slic {
        n_segments: usize,
        /// Weight of spatial distance against colour distance.
        compactness: f32,
        iterations: usize,
        /// Adjacent superpixels whose mean colours lie closer than this are
        /// merged.
        merge_tol: f32,
    },
}

impl ClassicalMethod {
    pub fn slic_default() -> Self {
        ClassicalMethod::Slic { n_segments: 100, compactness: 10.0, iterations: 10, merge_tol: 2.0 }
    }
}

impl FromStr for ClassicalMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "otsu" => Ok(ClassicalMethod::Otsu),
            "watershed" => Ok(ClassicalMethod::Watershed),
            "slic" => Ok(ClassicalMethod::slic_default()),
            other => Err(Error::Config(format!("unknown segmentation method {other:?} (expected otsu, watershed or slic)"))),
        }
    }
}

/// ITU-R BT.601 luma, rounded.
pub fn grayscale(image: ArrayView3<u8>) -> Array2<u8> {
    let (h, w, _) = image.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let v = 299 * image[[y, x, 0]] as u32 + 587 * image[[y, x, 1]] as u32 + 114 * image[[y, x, 2]] as u32;
        ((v + 500) / 1000) as u8
    })
}

/// Between-class variance of splitting the histogram into `<= t` and `> t`.
pub fn between_class_variance(hist: &[u64; 256], t: usize) -> f64 {
    let total: u64 = hist.iter().sum();
    let w0: u64 = hist[..=t].iter().sum();
    let w1 = total - w0;
    if w0 == 0 || w1 == 0 {
        return 0.0;
    }
    let s0: f64 = hist[..=t].iter().enumerate().map(|(v, &n)| v as f64 * n as f64).sum();
    let s1: f64 = hist[t + 1..].iter().enumerate().map(|(v, &n)| (v + t + 1) as f64 * n as f64).sum();
    let (m0, m1) = (s0 / w0 as f64, s1 / w1 as f64);
    let (p0, p1) = (w0 as f64 / total as f64, w1 as f64 / total as f64);
    p0 * p1 * (m0 - m1) * (m0 - m1)
}

pub fn histogram(gray: ArrayView2<u8>) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for &v in gray {
        hist[v as usize] += 1;
    }
    hist
}

/// Threshold `t` maximising between-class variance for the split
/// `<= t | > t`: the middle of the first run of maximising values.
pub fn otsu_threshold(gray: ArrayView2<u8>) -> u8 {
    let hist = histogram(gray);
    let vars: Vec<f64> = (0..256).map(|t| between_class_variance(&hist, t)).collect();
    let best = vars.iter().cloned().fold(0.0, f64::max);
    let tol = best * 1e-12;
    let lo = vars.iter().position(|&v| v >= best - tol).unwrap_or(0);
    let hi = lo + vars[lo..].iter().take_while(|&&v| v >= best - tol).count() - 1;
    ((lo + hi) / 2) as u8
}

/// Labels 0 (at or below the Otsu threshold) and 1.
pub fn otsu(gray: ArrayView2<u8>) -> Array2<u32> {
    let t = otsu_threshold(gray);
    gray.mapv(|v| (v > t) as u32)
}

/// Sobel gradient magnitude with edge replication.
pub fn sobel(gray: ArrayView2<u8>) -> Array2<f32> {
    let (h, w) = gray.dim();
    let at = |y: isize, x: isize| gray[[y.clamp(0, h as isize - 1) as usize, x.clamp(0, w as isize - 1) as usize]] as f32;
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (y, x) = (y as isize, x as isize);
        let gx = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)
            - at(y - 1, x - 1)
            - 2.0 * at(y, x - 1)
            - at(y + 1, x - 1);
        let gy = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)
            - at(y - 1, x - 1)
            - 2.0 * at(y - 1, x)
            - at(y - 1, x + 1);
        (gx * gx + gy * gy).sqrt()
    })
}

fn neighbours(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    N4.iter().filter_map(move |&(dy, dx)| {
        let (ny, nx) = (y as isize + dy, x as isize + dx);
        (ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w).then_some((ny as usize, nx as usize))
    })
}

/// Regional minima of `f` (4-connected plateaus with no lower neighbour),
/// labelled from 1.
pub fn regional_minima(f: ArrayView2<f32>) -> Array2<u32> {
    let (h, w) = f.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut labels = Array2::zeros((h, w));
    let mut next = 1;
    for y in 0..h {
        for x in 0..w {
            if seen[[y, x]] {
                continue;
            }
            let v = f[[y, x]];
            let mut plateau = vec![(y, x)];
            let mut queue = VecDeque::from([(y, x)]);
            seen[[y, x]] = true;
            let mut minimum = true;
            while let Some((cy, cx)) = queue.pop_front() {
                for (ny, nx) in neighbours(cy, cx, h, w) {
                    let nv = f[[ny, nx]];
                    if nv < v {
                        minimum = false;
                    } else if nv == v && !seen[[ny, nx]] {
                        seen[[ny, nx]] = true;
                        plateau.push((ny, nx));
                        queue.push_back((ny, nx));
                    }
                }
            }
            if minimum {
                for p in plateau {
                    labels[p] = next;
                }
                next += 1;
            }
        }
    }
    labels
}

/// Chamfer (3-4) distance from each pixel where `inside` holds to the
/// nearest pixel where it does not, in units of one third of a pixel.
fn chamfer(inside: &Array2<bool>) -> Array2<u32> {
    let (h, w) = inside.dim();
    let far = u32::MAX / 2;
    let mut d = inside.mapv(|v| if v { far } else { 0 });
    let relax = |d: &mut Array2<u32>, y: usize, x: usize, offs: &[(isize, isize, u32)]| {
        for &(dy, dx, c) in offs {
            let (ny, nx) = (y as isize + dy, x as isize + dx);
            if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                let cand = d[[ny as usize, nx as usize]] + c;
                if cand < d[[y, x]] {
                    d[[y, x]] = cand;
                }
            }
        }
    };
    let fwd = [(-1, -1, 4), (-1, 0, 3), (-1, 1, 4), (0, -1, 3)];
    let bwd = [(1, 1, 4), (1, 0, 3), (1, -1, 4), (0, 1, 3)];
    for y in 0..h {
        for x in 0..w {
            relax(&mut d, y, x, &fwd);
        }
    }
    for y in (0..h).rev() {
        for x in (0..w).rev() {
            relax(&mut d, y, x, &bwd);
        }
    }
    d
}

/// 4-connected components of `on`, labelled from `first`.
fn components(on: &Array2<bool>, first: u32) -> (Array2<u32>, u32) {
    let (h, w) = on.dim();
    let mut labels = Array2::zeros((h, w));
    let mut next = first;
    for y in 0..h {
        for x in 0..w {
            if !on[[y, x]] || labels[[y, x]] != 0 {
                continue;
            }
            labels[[y, x]] = next;
            let mut queue = VecDeque::from([(y, x)]);
            while let Some((cy, cx)) = queue.pop_front() {
                for (ny, nx) in neighbours(cy, cx, h, w) {
                    if on[[ny, nx]] && labels[[ny, nx]] == 0 {
                        labels[[ny, nx]] = next;
                        queue.push_back((ny, nx));
                    }
                }
            }
            next += 1;
        }
    }
    (labels, next)
}

/// Watershed markers from a binary mask: label 1 for background at least
/// two pixels from any building, then one label per core region (distance
/// to background at least half the component's peak).
pub fn markers_from_mask(mask: ArrayView2<u8>) -> Array2<u32> {
    let fg = mask.mapv(|v| v > 0);
    let bg = fg.mapv(|v| !v);
    let d_in = chamfer(&fg);
    let d_out = chamfer(&bg);
    let (comp, _) = components(&fg, 1);
    let mut peak: HashMap<u32, u32> = HashMap::new();
    for (&c, &d) in comp.iter().zip(d_in.iter()) {
        if c > 0 {
            let e = peak.entry(c).or_insert(0);
            *e = (*e).max(d);
        }
    }
    let core = ndarray::Zip::from(&comp).and(&d_in).map_collect(|&c, &d| c > 0 && 2 * d >= peak[&c]);
    let (mut markers, _) = components(&core, 2);
    for ((m, &b), &d) in markers.iter_mut().zip(bg.iter()).zip(d_out.iter()) {
        if b && d >= 6 {
            *m = 1;
        }
    }
    markers
}

/// Priority flood of the gradient of `gray` from `markers` (0 = unlabelled).
/// Every pixel receives the label of the basin that reaches it first.
pub fn watershed(gray: ArrayView2<u8>, markers: Option<ArrayView2<u32>>) -> Result<Array2<u32>> {
    let (h, w) = gray.dim();
    let grad = sobel(gray);
    let mut labels = match markers {
        Some(m) => {
            if m.dim() != (h, w) {
                return Err(Error::Shape(format!("markers {:?} vs image {:?}", m.dim(), (h, w))));
            }
            if h * w > 0 && m.iter().all(|&v| v == 0) {
                return Err(Error::Invalid("watershed markers are all zero".into()));
            }
            m.to_owned()
        }
        None => regional_minima(grad.view()),
    };
    // Non-negative floats order like their bit patterns.
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    for y in 0..h {
        for x in 0..w {
            if labels[[y, x]] != 0 {
                heap.push(Reverse((grad[[y, x]].to_bits(), seq, y, x)));
                seq += 1;
            }
        }
    }
    while let Some(Reverse((_, _, y, x))) = heap.pop() {
        let l = labels[[y, x]];
        for (ny, nx) in neighbours(y, x, h, w) {
            if labels[[ny, nx]] == 0 {
                labels[[ny, nx]] = l;
                heap.push(Reverse((grad[[ny, nx]].to_bits(), seq, ny, nx)));
                seq += 1;
            }
        }
    }
    Ok(labels)
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut a: usize) -> usize {
        while self.0[a] != a {
            self.0[a] = self.0[self.0[a]];
            a = self.0[a];
        }
        a
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Renumbers labels 0.. in raster order of first appearance.
fn relabel(labels: &mut Array2<u32>) {
    let mut map = HashMap::new();
    for l in labels.iter_mut() {
        let n = map.len() as u32;
        *l = *map.entry(*l).or_insert(n);
    }
}

/// SLIC superpixels on RGB colour, followed by connectivity enforcement and
/// merging of adjacent segments with near-identical mean colour.
pub fn slic(image: ArrayView3<u8>, n_segments: usize, compactness: f32, iterations: usize, merge_tol: f32) -> Result<Array2<u32>> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::Shape(format!("slic needs 3 colour channels, got {c}")));
    }
    if h == 0 || w == 0 || n_segments == 0 {
        return Err(Error::Invalid("slic needs a non-empty image and n_segments >= 1".into()));
    }
    if !(compactness > 0.0) || !(merge_tol >= 0.0) {
        return Err(Error::Invalid("slic needs compactness > 0 and merge_tol >= 0".into()));
    }
    let step = ((h * w) as f32 / n_segments as f32).sqrt().max(1.0);
    let ny = ((h as f32 / step).round() as usize).max(1);
    let nx = ((w as f32 / step).round() as usize).max(1);
    let px = |y: usize, x: usize| [image[[y, x, 0]] as f32, image[[y, x, 1]] as f32, image[[y, x, 2]] as f32];
    // (y, x, r, g, b)
    let mut centres: Vec<[f32; 5]> = Vec::with_capacity(ny * nx);
    for i in 0..ny {
        for j in 0..nx {
            let cy = ((i as f32 + 0.5) * h as f32 / ny as f32) as usize;
            let cx = ((j as f32 + 0.5) * w as f32 / nx as f32) as usize;
            let [r, g, b] = px(cy.min(h - 1), cx.min(w - 1));
            centres.push([cy as f32, cx as f32, r, g, b]);
        }
    }
    let spatial = (compactness / step).powi(2);
    let window = (2.0 * step).ceil() as isize;
    let mut labels = Array2::<u32>::zeros((h, w));
    for _ in 0..iterations.max(1) {
        let mut dist = Array2::from_elem((h, w), f32::INFINITY);
        for (k, cen) in centres.iter().enumerate() {
            let (cy, cx) = (cen[0] as isize, cen[1] as isize);
            for y in (cy - window).max(0)..(cy + window + 1).min(h as isize) {
                for x in (cx - window).max(0)..(cx + window + 1).min(w as isize) {
                    let (y, x) = (y as usize, x as usize);
                    let p = px(y, x);
                    let dc = (p[0] - cen[2]).powi(2) + (p[1] - cen[3]).powi(2) + (p[2] - cen[4]).powi(2);
                    let ds = (y as f32 - cen[0]).powi(2) + (x as f32 - cen[1]).powi(2);
                    let d = dc + spatial * ds;
                    if d < dist[[y, x]] {
                        dist[[y, x]] = d;
                        labels[[y, x]] = k as u32;
                    }
                }
            }
        }
        let mut sums = vec![[0f64; 6]; centres.len()];
        for ((y, x), &l) in labels.indexed_iter() {
            let p = px(y, x);
            let s = &mut sums[l as usize];
            s[0] += y as f64;
            s[1] += x as f64;
            s[2] += p[0] as f64;
            s[3] += p[1] as f64;
            s[4] += p[2] as f64;
            s[5] += 1.0;
        }
        for (cen, s) in centres.iter_mut().zip(&sums) {
            if s[5] > 0.0 {
                for d in 0..5 {
                    cen[d] = (s[d] / s[5]) as f32;
                }
            }
        }
    }
    enforce_connectivity(&mut labels, ((step * step) / 4.0).max(1.0) as usize);
    merge_similar(&mut labels, image, merge_tol);
    relabel(&mut labels);
    Ok(labels)
}

/// Splits labels into 4-connected pieces; pieces smaller than `min_size`
/// join the piece of their first already-visited neighbour.
fn enforce_connectivity(labels: &mut Array2<u32>, min_size: usize) {
    let (h, w) = labels.dim();
    let mut out = Array2::from_elem((h, w), u32::MAX);
    let mut next = 0u32;
    for y in 0..h {
        for x in 0..w {
            if out[[y, x]] != u32::MAX {
                continue;
            }
            let orig = labels[[y, x]];
            let adjacent = neighbours(y, x, h, w).map(|p| out[p]).find(|&l| l != u32::MAX);
            let mut piece = vec![(y, x)];
            out[[y, x]] = next;
            let mut i = 0;
            while i < piece.len() {
                let (cy, cx) = piece[i];
                for (ny, nx) in neighbours(cy, cx, h, w) {
                    if out[[ny, nx]] == u32::MAX && labels[[ny, nx]] == orig {
                        out[[ny, nx]] = next;
                        piece.push((ny, nx));
                    }
                }
                i += 1;
            }
            match adjacent {
                Some(a) if piece.len() < min_size => {
                    for p in piece {
                        out[p] = a;
                    }
                }
                _ => next += 1,
            }
        }
    }
    *labels = out;
}

fn merge_similar(labels: &mut Array2<u32>, image: ArrayView3<u8>, tol: f32) {
    let (h, w) = labels.dim();
    let n = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    let mut sums = vec![[0f64; 4]; n];
    for ((y, x), &l) in labels.indexed_iter() {
        let s = &mut sums[l as usize];
        for c in 0..3 {
            s[c] += image[[y, x, c]] as f64;
        }
        s[3] += 1.0;
    }
    let mean = |l: u32| {
        let s = sums[l as usize];
        [s[0] / s[3], s[1] / s[3], s[2] / s[3]]
    };
    let mut uf = UnionFind((0..n).collect());
    for y in 0..h {
        for x in 0..w {
            let a = labels[[y, x]];
            for (ny, nx) in [(y + 1, x), (y, x + 1)] {
                if ny < h && nx < w {
                    let b = labels[[ny, nx]];
                    if a != b {
                        let (ma, mb) = (mean(a), mean(b));
                        let d = ((ma[0] - mb[0]).powi(2) + (ma[1] - mb[1]).powi(2) + (ma[2] - mb[2]).powi(2)).sqrt();
                        if d <= tol as f64 {
                            uf.union(a as usize, b as usize);
                        }
                    }
                }
            }
        }
    }
    for l in labels.iter_mut() {
        *l = uf.find(*l as usize) as u32;
    }
}

/// Dispatches to one method on an `(H, W, 3)` image. `markers` seed the
/// watershed when present.
pub fn classical_segment(image: ArrayView3<u8>, method: &ClassicalMethod, markers: Option<ArrayView2<u32>>) -> Result<Array2<u32>> {
    let gray = grayscale(image);
    match *method {
        ClassicalMethod::Otsu => Ok(otsu(gray.view())),
        ClassicalMethod::Watershed => watershed(gray.view(), markers),
        ClassicalMethod::Slic { n_segments, compactness, iterations, merge_tol } => {
            slic(image, n_segments, compactness, iterations, merge_tol)
        }
    }
}

/// Union of the segments whose fraction of pixels inside `mask` is at least
/// `overlap_tau`.
pub fn superpixel_fuse(mask: ArrayView2<u8>, labels: ArrayView2<u32>, overlap_tau: f64) -> Result<Array2<u8>> {
    if mask.dim() != labels.dim() {
        return Err(Error::Shape(format!("mask {:?} vs labels {:?}", mask.dim(), labels.dim())));
    }
    if !(0.0..=1.0).contains(&overlap_tau) {
        return Err(Error::Invalid(format!("overlap_tau must lie in [0, 1], got {overlap_tau}")));
    }
    let mut tally: HashMap<u32, (u64, u64)> = HashMap::new();
    for (&m, &l) in mask.iter().zip(labels.iter()) {
        let e = tally.entry(l).or_default();
        e.0 += (m > 0) as u64;
        e.1 += 1;
    }
    Ok(labels.mapv(|l| {
        let (inside, total) = tally[&l];
        (inside as f64 >= overlap_tau * total as f64) as u8
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    #[test]
    fn otsu_splits_a_bimodal_image() {
        let g = Array2::from_shape_fn((10, 12), |(_, x)| if x < 6 { 50u8 } else { 200 });
        let t = otsu_threshold(g.view());
        assert!((50..200).contains(&t), "{t}");
        // Exhaustive reference: the chosen split attains the maximal variance.
        let hist = histogram(g.view());
        let best = (0..256).map(|t| between_class_variance(&hist, t)).fold(0.0, f64::max);
        assert_eq!(between_class_variance(&hist, t as usize), best);
        let labels = otsu(g.view());
        assert!(labels.indexed_iter().all(|((_, x), &l)| l == (x >= 6) as u32));
    }

    #[test]
    fn constant_image_has_one_label_everywhere() {
        let img = Array3::from_elem((16, 16, 3), 90u8);
        for m in ["otsu", "watershed", "slic"] {
            let method: ClassicalMethod = m.parse().unwrap();
            let labels = classical_segment(img.view(), &method, None).unwrap();
            let first = labels[[0, 0]];
            assert!(labels.iter().all(|&l| l == first), "{m}");
        }
        assert!("kmeans".parse::<ClassicalMethod>().is_err());
    }

    #[test]
    fn slic_finds_quadrants() {
        let colours = [[255u8, 0, 0], [0, 255, 0], [0, 0, 255], [255, 255, 0]];
        let img = Array3::from_shape_fn((40, 40, 3), |(y, x, c)| colours[(y / 20) * 2 + x / 20][c]);
        let labels = slic(img.view(), 4, 10.0, 10, 2.0).unwrap();
        let quad = |y: usize, x: usize| (y / 20) * 2 + x / 20;
        let mut map = HashMap::new();
        for ((y, x), &l) in labels.indexed_iter() {
            assert_eq!(*map.entry(quad(y, x)).or_insert(l), l);
        }
        let distinct: std::collections::HashSet<_> = map.values().collect();
        assert_eq!(distinct.len(), 4);
    }

    #[test]
    fn watershed_separates_two_basins() {
        // Two dark squares on a bright field.
        let g = Array2::from_shape_fn((20, 30), |(y, x)| {
            if (4..14).contains(&y) && ((3..11).contains(&x) || (18..27).contains(&x)) {
                20u8
            } else {
                220
            }
        });
        let mask = g.mapv(|v| (v < 100) as u8);
        let markers = markers_from_mask(mask.view());
        let labels = watershed(g.view(), Some(markers.view())).unwrap();
        assert_ne!(labels[[8, 6]], labels[[8, 22]]);
        assert_eq!(labels[[0, 0]], 1);
        assert!(labels.iter().all(|&l| l > 0));
        let unseeded = watershed(g.view(), None).unwrap();
        assert!(unseeded.iter().all(|&l| l > 0));
        assert!(watershed(g.view(), Some(Array2::zeros((20, 30)).view())).is_err());
    }

    #[test]
    fn fuse_keeps_segments_by_overlap() {
        let labels = Array2::from_shape_fn((2, 10), |(y, _)| y as u32);
        // Segment 0 fully inside, segment 1 with 6 of 10 pixels inside.
        let mask = Array2::from_shape_fn((2, 10), |(y, x)| (y == 0 || x < 6) as u8);
        let kept = superpixel_fuse(mask.view(), labels.view(), 0.5).unwrap();
        assert!(kept.iter().all(|&v| v == 1));
        let kept = superpixel_fuse(mask.view(), labels.view(), 0.7).unwrap();
        assert_eq!(kept.row(0).sum(), 10);
        assert_eq!(kept.row(1).sum(), 0);
        let empty = Array2::zeros((2, 10));
        assert_eq!(superpixel_fuse(empty.view(), labels.view(), 0.5).unwrap().sum(), 0);
    }

    proptest! {
        #[test]
        fn fuse_is_monotone_in_tau(
            mask in proptest::collection::vec(0u8..2, 36),
            labels in proptest::collection::vec(0u32..5, 36),
            a in 0.0f64..=1.0, b in 0.0f64..=1.0,
        ) {
            let m = Array2::from_shape_vec((6, 6), mask).unwrap();
            let l = Array2::from_shape_vec((6, 6), labels).unwrap();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let low = superpixel_fuse(m.view(), l.view(), lo).unwrap();
            let high = superpixel_fuse(m.view(), l.view(), hi).unwrap();
            prop_assert!(high.iter().zip(low.iter()).all(|(&h, &l)| h <= l));
        }

        #[test]
        fn otsu_attains_the_maximum(v in proptest::collection::vec(any::<u8>(), 1..64)) {
            let g = Array2::from_shape_vec((1, v.len()), v).unwrap();
            let hist = histogram(g.view());
            let best = (0..256).map(|t| between_class_variance(&hist, t)).fold(0.0, f64::max);
            let t = otsu_threshold(g.view()) as usize;
            prop_assert!(between_class_variance(&hist, t) >= best * (1.0 - 1e-12));
        }
    }
}
