//! Iso-contour tracing on a raster: marching squares with linear edge
//! interpolation, saddle disambiguation by the cell-center sample, loop
//! stitching, containment hierarchy, and orientation normalization.
//!
//! Coordinates are lattice units (sample index space). The raster is padded
//! with one ring of outside samples before tracing, so every contour closes;
//! loops that used padding are clamped back to the window and flagged.

use crate::scalar::Real;
use std::collections::HashMap;

/// One closed contour in lattice coordinates (first vertex not repeated).
#[derive(Debug, Clone)]
pub struct TracedLoop<T> {
    pub points: Vec<[T; 2]>,
    /// Containment nesting level: 0 for outermost.
    pub depth: usize,
    pub parent: Option<usize>,
    /// True when the contour left the window and was closed along its edge.
    pub clipped: bool,
}

#[derive(Debug, Clone, Default)]
pub struct LoopHierarchy<T> {
    pub loops: Vec<TracedLoop<T>>,
}

impl<T: Real> LoopHierarchy<T> {
    pub fn is_empty(&self) -> bool {
        self.loops.is_empty()
    }
}

/// Signed polygon area (shoelace); positive for counter-clockwise.
pub fn signed_area<T: Real>(pts: &[[T; 2]]) -> T {
    let n = pts.len();
    let mut acc = T::zero();
    for i in 0..n {
        let j = (i + 1) % n;
        acc = acc + pts[i][0] * pts[j][1] - pts[j][0] * pts[i][1];
    }
    acc / T::of(2.0)
}

/// Even-odd point-in-polygon.
pub fn point_in_polygon<T: Real>(p: [T; 2], poly: &[[T; 2]]) -> bool {
    let n = poly.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
enum EdgeDir {
    H, // between (i,j) and (i+1,j)
    V, // between (i,j) and (i,j+1)
}

type EdgeKey = (i32, i32, EdgeDir);

/// Trace iso-`iso` contours of a res×res raster (x-fastest samples).
/// `min_vertices` / `min_area` drop noise loops (area in cell² units).
pub fn trace_loops<T: Real>(
    values: &[T],
    res: usize,
    iso: T,
    min_vertices: usize,
    min_area: T,
) -> LoopHierarchy<T> {
    assert_eq!(values.len(), res * res);
    let pad = res + 2;
    // pad with a ring of strongly-outside samples so contours always close
    let big = T::of(4.0);
    let mut grid = vec![big; pad * pad];
    for j in 0..res {
        for i in 0..res {
            grid[(j + 1) * pad + (i + 1)] = values[j * res + i];
        }
    }
    let inside = |v: T| v < iso;
    let at = |i: i32, j: i32| grid[(j as usize) * pad + i as usize];

    // directed segments with the inside region on the left of travel
    let mut seg_from: Vec<EdgeKey> = Vec::new();
    let mut seg_to: Vec<EdgeKey> = Vec::new();
    let mut start_of: HashMap<EdgeKey, u32> = HashMap::new();
    let n1 = (pad - 1) as i32;
    for j in 0..n1 {
        for i in 0..n1 {
            let (va, vb, vc, vd) = (at(i, j), at(i + 1, j), at(i + 1, j + 1), at(i, j + 1));
            let case = (inside(va) as usize)
                | (inside(vb) as usize) << 1
                | (inside(vc) as usize) << 2
                | (inside(vd) as usize) << 3;
            if case == 0 || case == 15 {
                continue;
            }
            let bottom = (i, j, EdgeDir::H);
            let top = (i, j + 1, EdgeDir::H);
            let left = (i, j, EdgeDir::V);
            let right = (i + 1, j, EdgeDir::V);
            let mut emit = |from: EdgeKey, to: EdgeKey| {
                start_of.insert(from, seg_from.len() as u32);
                seg_from.push(from);
                seg_to.push(to);
            };
            match case {
                1 => emit(bottom, left),
                2 => emit(right, bottom),
                3 => emit(right, left),
                4 => emit(top, right),
                5 => {
                    // saddle: resolved by the cell-center sample sign
                    let center = (va + vb + vc + vd) / T::of(4.0);
                    if inside(center) {
                        emit(bottom, right);
                        emit(top, left);
                    } else {
                        emit(bottom, left);
                        emit(top, right);
                    }
                }
                6 => emit(top, bottom),
                7 => emit(top, left),
                8 => emit(left, top),
                9 => emit(bottom, top),
                10 => {
                    let center = (va + vb + vc + vd) / T::of(4.0);
                    if inside(center) {
                        emit(right, top);
                        emit(left, bottom);
                    } else {
                        emit(right, bottom);
                        emit(left, top);
                    }
                }
                11 => emit(right, top),
                12 => emit(left, right),
                13 => emit(bottom, right),
                14 => emit(left, bottom),
                _ => unreachable!(),
            }
        }
    }

    // crossing position on a lattice edge, computed once per edge
    let crossing = |key: EdgeKey| -> [T; 2] {
        let (i, j, dir) = key;
        let (p0, p1, v0, v1) = match dir {
            EdgeDir::H => ([i, j], [i + 1, j], at(i, j), at(i + 1, j)),
            EdgeDir::V => ([i, j], [i, j + 1], at(i, j), at(i, j + 1)),
        };
        let t = (iso - v0) / (v1 - v0);
        [
            T::of(p0[0] as f64) + t * T::of((p1[0] - p0[0]) as f64),
            T::of(p0[1] as f64) + t * T::of((p1[1] - p0[1]) as f64),
        ]
    };

    // stitch: follow from-edge → to-edge → segment starting at that edge
    let mut visited = vec![false; seg_from.len()];
    let mut raw_loops: Vec<(Vec<[T; 2]>, bool)> = Vec::new();
    let hi = T::of((res - 1) as f64);
    for s0 in 0..seg_from.len() {
        if visited[s0] {
            continue;
        }
        let mut pts = Vec::new();
        let mut clipped = false;
        let mut s = s0;
        loop {
            visited[s] = true;
            let p = crossing(seg_from[s]);
            // unpad: original sample k lives at padded index k+1
            let x = p[0] - T::one();
            let y = p[1] - T::one();
            let cx = x.max(T::zero()).min(hi);
            let cy = y.max(T::zero()).min(hi);
            if cx != x || cy != y {
                clipped = true;
            }
            if pts.last() != Some(&[cx, cy]) {
                pts.push([cx, cy]);
            }
            let next = match start_of.get(&seg_to[s]) {
                Some(&n) => n as usize,
                None => break, // cannot happen on a padded grid
            };
            if next == s0 {
                break;
            }
            s = next;
        }
        while pts.len() > 1 && pts.first() == pts.last() {
            pts.pop();
        }
        raw_loops.push((pts, clipped));
    }

    // noise filter
    let kept: Vec<(Vec<[T; 2]>, bool)> = raw_loops
        .into_iter()
        .filter(|(pts, _)| pts.len() >= min_vertices && signed_area(pts).abs() >= min_area)
        .collect();

    // hierarchy by even-odd containment of a representative vertex
    let n = kept.len();
    let mut depth = vec![0usize; n];
    let mut parent = vec![None; n];
    for a in 0..n {
        let rep = kept[a].0[0];
        let mut containers: Vec<usize> = Vec::new();
        for b in 0..n {
            if a != b && point_in_polygon(rep, &kept[b].0) {
                containers.push(b);
            }
        }
        depth[a] = containers.len();
    }
    for a in 0..n {
        if depth[a] == 0 {
            continue;
        }
        let rep = kept[a].0[0];
        parent[a] = (0..n)
            .filter(|&b| b != a && depth[b] + 1 == depth[a] && point_in_polygon(rep, &kept[b].0))
            .next();
    }

    // orientation: outer loops (even depth) CCW, holes CW
    let loops = kept
        .into_iter()
        .enumerate()
        .map(|(idx, (mut pts, clipped))| {
            let ccw = signed_area(&pts) > T::zero();
            let want_ccw = depth[idx] % 2 == 0;
            if ccw != want_ccw {
                pts.reverse();
            }
            TracedLoop {
                points: pts,
                depth: depth[idx],
                parent: parent[idx],
                clipped,
            }
        })
        .collect();
    LoopHierarchy { loops }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raster<F: Fn(f64, f64) -> f64>(res: usize, f: F) -> Vec<f64> {
        // samples on the unit square at cell centers, like a profile raster
        let mut v = Vec::with_capacity(res * res);
        for j in 0..res {
            for i in 0..res {
                let x = (i as f64 + 0.5) / res as f64 * 2.0 - 1.0;
                let y = (j as f64 + 0.5) / res as f64 * 2.0 - 1.0;
                v.push(f(x, y));
            }
        }
        v
    }

    /// lattice → plane coordinate for the raster above
    fn to_plane(res: usize, p: [f64; 2]) -> [f64; 2] {
        [
            (p[0] + 0.5) / res as f64 * 2.0 - 1.0,
            (p[1] + 0.5) / res as f64 * 2.0 - 1.0,
        ]
    }

    #[test]
    fn circle_gives_one_ccw_loop_with_correct_area() {
        let res = 128;
        let r = 0.6;
        let v = raster(res, |x, y| x * x + y * y - r * r);
        let h = trace_loops(&v, res, 0.0, 8, 4.0);
        assert_eq!(h.loops.len(), 1);
        let lp = &h.loops[0];
        assert_eq!(lp.depth, 0);
        assert_eq!(lp.parent, None);
        assert!(!lp.clipped);
        let plane: Vec<[f64; 2]> = lp.points.iter().map(|&p| to_plane(res, p)).collect();
        let area = signed_area(&plane);
        assert!(area > 0.0, "outer loop must be CCW");
        let expect = std::f64::consts::PI * r * r;
        assert!(
            (area - expect).abs() / expect < 0.01,
            "area {area} vs {expect}"
        );
    }

    #[test]
    fn annulus_gives_nested_pair() {
        let res = 128;
        let (r1, r2) = (0.25, 0.7);
        // negative between the radii
        let v = raster(res, |x, y| {
            let rho2 = x * x + y * y;
            (r1 * r1 - rho2).max(rho2 - r2 * r2)
        });
        let h = trace_loops(&v, res, 0.0, 8, 4.0);
        assert_eq!(h.loops.len(), 2);
        let outer = h.loops.iter().position(|l| l.depth == 0).unwrap();
        let inner = h.loops.iter().position(|l| l.depth == 1).unwrap();
        assert_eq!(h.loops[inner].parent, Some(outer));
        let area_outer = signed_area(&h.loops[outer].points);
        let area_inner = signed_area(&h.loops[inner].points);
        assert!(area_outer > 0.0, "outer CCW");
        assert!(area_inner < 0.0, "hole CW");
    }

    #[test]
    fn all_positive_raster_has_no_loops() {
        let v = raster(64, |_, _| 0.5);
        let h = trace_loops(&v, 64, 0.0, 8, 4.0);
        assert!(h.is_empty());
    }

    #[test]
    fn contour_reaching_the_boundary_is_clipped_closed() {
        let res = 64;
        // disk larger than the window: negative region crosses every edge
        let v = raster(res, |x, y| x * x + y * y - 4.0);
        let h = trace_loops(&v, res, 0.0, 8, 4.0);
        assert_eq!(h.loops.len(), 1);
        assert!(h.loops[0].clipped);
        // area ≈ the full window in lattice units
        let area = signed_area(&h.loops[0].points).abs();
        let full = ((res - 1) as f64).powi(2);
        assert!(area > 0.9 * full, "area {area} vs window {full}");
    }

    #[test]
    fn saddle_cells_respect_center_sign() {
        // 2×2 checkerboard-ish field with a saddle in the middle cell block
        let res = 32;
        let v = raster(res, |x, y| x * y); // saddle at origin
        let h = trace_loops(&v, res, 0.0, 4, 1.0);
        // two inside quadrants (x·y < 0): expect two separate loops
        assert_eq!(h.loops.len(), 2);
        for l in &h.loops {
            assert_eq!(l.depth, 0);
        }
    }
}
