//! Vector outlines of mask components.
//!
//! Pixel `(row r, col c)` covers the square `[c, c+1] x [r, r+1]`; polygon
//! vertices are `[x, y]` pixel-corner coordinates with y pointing down.

use std::collections::{HashMap, VecDeque};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Components with fewer pixels are dropped.
pub const DEFAULT_MIN_AREA: usize = 20;

pub type Ring = Vec<[f64; 2]>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub id: usize,
    /// 4-connected component index in raster order of first pixel.
    pub component: usize,
    /// Open ring (first vertex not repeated), clockwise on screen.
    pub exterior: Ring,
    pub holes: Vec<Ring>,
    pub area: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PolygonSet {
    pub height: usize,
    pub width: usize,
    pub polygons: Vec<Polygon>,
}

impl PolygonSet {
    pub fn len(&self) -> usize {
        self.polygons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.polygons.is_empty()
    }

    /// GeoJSON-style feature collection in pixel coordinates.
    pub fn to_geojson(&self) -> serde_json::Value {
        let close = |r: &Ring| {
            let mut v: Vec<[f64; 2]> = r.clone();
            if let Some(&f) = r.first() {
                v.push(f);
            }
            v
        };
        let features: Vec<_> = self
            .polygons
            .iter()
            .map(|p| {
                let mut rings = vec![close(&p.exterior)];
                rings.extend(p.holes.iter().map(close));
                serde_json::json!({
                    "type": "Feature",
                    "geometry": { "type": "Polygon", "coordinates": rings },
                    "properties": { "id": p.id, "component": p.component, "area": p.area },
                })
            })
            .collect();
        serde_json::json!({
            "type": "FeatureCollection",
            "properties": { "height": self.height, "width": self.width, "units": "pixels" },
            "features": features,
        })
    }
}

pub fn signed_area(ring: &[[f64; 2]]) -> f64 {
    let n = ring.len();
    (0..n)
        .map(|i| {
            let (a, b) = (ring[i], ring[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        / 2.0
}

fn label_components(mask: ArrayView2<u8>) -> (Array2<u32>, Vec<Vec<(usize, usize)>>) {
    let (h, w) = mask.dim();
    let mut labels = Array2::from_elem((h, w), u32::MAX);
    let mut comps = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] == 0 || labels[[y, x]] != u32::MAX {
                continue;
            }
            let id = comps.len() as u32;
            labels[[y, x]] = id;
            let mut pixels = vec![(y, x)];
            let mut queue = VecDeque::from([(y, x)]);
            while let Some((cy, cx)) = queue.pop_front() {
                let cand = [
                    (cy.wrapping_sub(1), cx),
                    (cy + 1, cx),
                    (cy, cx.wrapping_sub(1)),
                    (cy, cx + 1),
                ];
                for (ny, nx) in cand {
                    if ny < h && nx < w && mask[[ny, nx]] != 0 && labels[[ny, nx]] == u32::MAX {
                        labels[[ny, nx]] = id;
                        pixels.push((ny, nx));
                        queue.push_back((ny, nx));
                    }
                }
            }
            comps.push(pixels);
        }
    }
    (labels, comps)
}

type Pt = (i64, i64);

/// Closed crack-edge loops around one component, foreground on the right of
/// travel. At a vertex with two exits the sharpest right turn wins, which
/// keeps diagonally touching pixels apart.
fn trace(pixels: &[(usize, usize)], labels: &Array2<u32>, id: u32) -> Vec<Vec<Pt>> {
    let (h, w) = labels.dim();
    let inside = |y: i64, x: i64| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && labels[[y as usize, x as usize]] == id;
    let mut out: HashMap<Pt, Vec<Pt>> = HashMap::new();
    let mut edges = Vec::new();
    for &(r, c) in pixels {
        let (y, x) = (r as i64, c as i64);
        if !inside(y - 1, x) {
            edges.push(((x, y), (x + 1, y)));
        }
        if !inside(y, x + 1) {
            edges.push(((x + 1, y), (x + 1, y + 1)));
        }
        if !inside(y + 1, x) {
            edges.push(((x + 1, y + 1), (x, y + 1)));
        }
        if !inside(y, x - 1) {
            edges.push(((x, y + 1), (x, y)));
        }
    }
    for &(a, b) in &edges {
        out.entry(a).or_default().push(b);
    }
    let mut loops = Vec::new();
    for &(start, first) in &edges {
        let Some(exits) = out.get_mut(&start) else { continue };
        let Some(pos) = exits.iter().position(|&e| e == first) else { continue };
        exits.swap_remove(pos);
        let mut ring = vec![start];
        let (mut prev, mut cur) = (start, first);
        while cur != start {
            ring.push(cur);
            let d = (cur.0 - prev.0, cur.1 - prev.1);
            let exits = out.get_mut(&cur).expect("boundary loops are closed");
            let right = (-d.1, d.0);
            let left = (d.1, -d.0);
            let pick = [right, d, left]
                .iter()
                .find_map(|&dir| exits.iter().position(|&e| (e.0 - cur.0, e.1 - cur.1) == dir))
                .expect("boundary loops are closed");
            let next = exits.swap_remove(pick);
            prev = cur;
            cur = next;
        }
        loops.push(ring);
    }
    loops
}

/// Drops vertices where the direction of travel does not change.
fn corners(ring: &[Pt]) -> Ring {
    let n = ring.len();
    let mut v = Vec::new();
    for i in 0..n {
        let (a, b, c) = (ring[(i + n - 1) % n], ring[i], ring[(i + 1) % n]);
        let cross = (b.0 - a.0) * (c.1 - b.1) - (b.1 - a.1) * (c.0 - b.0);
        let reverse = (b.0 - a.0) * (c.0 - b.0) + (b.1 - a.1) * (c.1 - b.1) < 0;
        if cross != 0 || reverse {
            v.push([b.0 as f64, b.1 as f64]);
        }
    }
    v
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return ((p[0] - a[0]).powi(2) + (p[1] - a[1]).powi(2)).sqrt();
    }
    let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0);
    ((p[0] - a[0] - t * dx).powi(2) + (p[1] - a[1] - t * dy).powi(2)).sqrt()
}

fn douglas_peucker(points: &[[f64; 2]], tol: f64, keep: &mut [bool]) {
    let mut stack = vec![(0, points.len() - 1)];
    while let Some((i, j)) = stack.pop() {
        if j <= i + 1 {
            continue;
        }
        let (mut best, mut dist) = (i, -1.0);
        for k in i + 1..j {
            let d = point_segment_distance(points[k], points[i], points[j]);
            if d > dist {
                best = k;
                dist = d;
            }
        }
        if dist > tol {
            keep[best] = true;
            stack.push((i, best));
            stack.push((best, j));
        }
    }
}

/// Douglas-Peucker on a closed ring, anchored at vertex 0 and the vertex
/// farthest from it. Rings that would collapse below 3 vertices are kept.
pub fn simplify_ring(ring: &Ring, tol: f64) -> Ring {
    if tol <= 0.0 || ring.len() <= 4 {
        return ring.clone();
    }
    let far = (1..ring.len())
        .max_by(|&a, &b| {
            let d = |k: usize| (ring[k][0] - ring[0][0]).powi(2) + (ring[k][1] - ring[0][1]).powi(2);
            d(a).total_cmp(&d(b))
        })
        .unwrap_or(0);
    let mut closed = ring.clone();
    closed.push(ring[0]);
    let mut keep = vec![false; closed.len()];
    keep[0] = true;
    keep[far] = true;
    douglas_peucker(&closed[..=far], tol, &mut keep[..=far]);
    douglas_peucker(&closed[far..], tol, &mut keep[far..]);
    let out: Ring = ring.iter().zip(&keep).filter(|(_, &k)| k).map(|(p, _)| *p).collect();
    if out.len() < 3 || signed_area(&out).abs() == 0.0 {
        ring.clone()
    } else {
        out
    }
}

/// Traces each 4-connected component with at least `min_area` pixels into
/// an exterior ring plus holes, simplified at `simplify_tol` pixels.
pub fn polygonize(mask: ArrayView2<u8>, simplify_tol: f64, min_area: usize) -> Result<PolygonSet> {
    if !(simplify_tol >= 0.0) {
        return Err(Error::Invalid(format!("simplify_tol must be >= 0, got {simplify_tol}")));
    }
    let (h, w) = mask.dim();
    let (labels, comps) = label_components(mask);
    let mut polygons = Vec::new();
    for (cid, pixels) in comps.iter().enumerate() {
        if pixels.len() < min_area.max(1) {
            continue;
        }
        let mut exterior: Option<Ring> = None;
        let mut holes = Vec::new();
        for lp in trace(pixels, &labels, cid as u32) {
            let ring = simplify_ring(&corners(&lp), simplify_tol);
            if signed_area(&ring) > 0.0 {
                match &exterior {
                    Some(e) if signed_area(e) >= signed_area(&ring) => holes.push(ring),
                    _ => {
                        if let Some(e) = exterior.replace(ring) {
                            holes.push(e);
                        }
                    }
                }
            } else {
                holes.push(ring);
            }
        }
        let exterior = exterior.expect("every component has an outer boundary");
        let area = signed_area(&exterior) - holes.iter().map(|r| signed_area(r).abs()).sum::<f64>();
        if area > 0.0 {
            polygons.push(Polygon { id: polygons.len(), component: cid, exterior, holes, area });
        }
    }
    Ok(PolygonSet { height: h, width: w, polygons })
}

/// Even-odd fill of every polygon, sampled at pixel centres.
pub fn rasterize(set: &PolygonSet, height: usize, width: usize) -> Array2<u8> {
    let mut out = Array2::zeros((height, width));
    for p in &set.polygons {
        let rings: Vec<&Ring> = std::iter::once(&p.exterior).chain(&p.holes).collect();
        for r in 0..height {
            let yc = r as f64 + 0.5;
            let mut xs = Vec::new();
            for ring in &rings {
                let n = ring.len();
                for i in 0..n {
                    let (a, b) = (ring[i], ring[(i + 1) % n]);
                    if (a[1] <= yc) != (b[1] <= yc) {
                        xs.push(a[0] + (yc - a[1]) * (b[0] - a[0]) / (b[1] - a[1]));
                    }
                }
            }
            xs.sort_by(f64::total_cmp);
            for pair in xs.chunks_exact(2) {
                let c0 = (pair[0] - 0.5).ceil().max(0.0) as usize;
                let c1 = ((pair[1] - 0.5).ceil().max(0.0) as usize).min(width);
                for c in c0..c1 {
                    out[[r, c]] = 1;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn filled_square_is_four_corners() {
        let mut m = Array2::zeros((16, 16));
        m.slice_mut(ndarray::s![3..13, 4..14]).fill(1);
        let set = polygonize(m.view(), 0.0, DEFAULT_MIN_AREA).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.polygons[0].exterior.len(), 4);
        assert_eq!(set.polygons[0].area, 100.0);
        assert_eq!(rasterize(&set, 16, 16), m);
    }

    #[test]
    fn empty_mask_gives_no_polygons() {
        assert!(polygonize(Array2::zeros((5, 5)).view(), 1.0, 20).unwrap().is_empty());
        assert!(polygonize(Array2::zeros((5, 5)).view(), -1.0, 20).is_err());
    }

    #[test]
    fn disjoint_squares_get_distinct_ids() {
        let mut m = Array2::zeros((20, 30));
        m.slice_mut(ndarray::s![2..8, 2..8]).fill(1);
        m.slice_mut(ndarray::s![10..18, 15..25]).fill(1);
        m[[0, 29]] = 1;
        let set = polygonize(m.view(), 0.5, DEFAULT_MIN_AREA).unwrap();
        assert_eq!(set.len(), 2);
        assert_ne!(set.polygons[0].id, set.polygons[1].id);
        assert_eq!(set.polygons[1].area, 80.0);
        let gj = set.to_geojson();
        assert_eq!(gj["features"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn ring_with_hole_and_island() {
        let mut m = Array2::zeros((12, 12));
        m.slice_mut(ndarray::s![1..11, 1..11]).fill(1);
        m.slice_mut(ndarray::s![3..9, 3..9]).fill(0);
        m.slice_mut(ndarray::s![5..7, 5..7]).fill(1);
        let set = polygonize(m.view(), 0.0, 1).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.polygons[0].holes.len(), 1);
        assert_eq!(set.polygons[0].area, 64.0);
        assert_eq!(rasterize(&set, 12, 12), m);
    }

    #[test]
    fn simplification_reduces_staircases() {
        let m = Array2::from_shape_fn((30, 30), |(y, x)| (x + y < 30) as u8);
        let exact = polygonize(m.view(), 0.0, 1).unwrap();
        let simple = polygonize(m.view(), 1.0, 1).unwrap();
        assert!(simple.polygons[0].exterior.len() < exact.polygons[0].exterior.len());
        assert!(simple.polygons[0].area > 0.0);
    }

    proptest! {
        #[test]
        fn rasterize_inverts_polygonize(bits in proptest::collection::vec(0u8..2, 64)) {
            let m = Array2::from_shape_vec((8, 8), bits).unwrap();
            let set = polygonize(m.view(), 0.0, 1).unwrap();
            prop_assert_eq!(rasterize(&set, 8, 8), m.clone());
            let total: f64 = set.polygons.iter().map(|p| p.area).sum();
            prop_assert_eq!(total, m.iter().map(|&v| v as f64).sum::<f64>());
        }

        #[test]
        fn small_components_are_dropped(bits in proptest::collection::vec(0u8..2, 64)) {
            let m = Array2::from_shape_vec((8, 8), bits).unwrap();
            let set = polygonize(m.view(), 0.0, 5).unwrap();
            prop_assert!(set.polygons.iter().all(|p| p.area >= 5.0));
        }
    }
}
