//! Dominant-point detection on closed digital curves: per-point region of
//! support from the chord-length / perpendicular-distance ratio, k-cosine
//! curvature, and non-maxima suppression over the support region.
//!
//! The cosine measure is evaluated at one common arm length so measures are
//! comparable between points; the suppression window still comes from each
//! point's own region of support. Suppression requires a meaningful
//! difference (`SUPPRESS_TOL` on the 1+cos scale), so uniformly curved loops
//! keep an evenly spread point set instead of amplifying positional noise.

use crate::scalar::Real;

/// Measures at or below this count as straight and are dropped outright.
const STRAIGHT_EPS: f64 = 1e-6;
/// A neighbor must beat a point's measure by this much to suppress it.
const SUPPRESS_TOL: f64 = 0.02;

fn sub<T: Real>(a: [T; 2], b: [T; 2]) -> [T; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm<T: Real>(v: [T; 2]) -> T {
    (v[0] * v[0] + v[1] * v[1]).sqrt()
}

/// Indices of the dominant points of a closed polyline, ascending.
pub fn dominant_points<T: Real>(pts: &[[T; 2]]) -> Vec<usize> {
    let n = pts.len();
    assert!(n >= 8, "dominant_points expects ≥ 8 vertices");
    let wrap = |i: isize| -> usize { i.rem_euclid(n as isize) as usize };
    // support cap keeps windows local on uniformly curved loops
    let k_cap = (n / 8).max(2);
    // common arm length for the curvature measure
    let k_cos = (n / 32).clamp(2, 16);

    let mut support = vec![1usize; n];
    let mut measure = vec![T::zero(); n];
    for i in 0..n {
        let chord = |k: usize| {
            let a = pts[wrap(i as isize + k as isize)];
            let b = pts[wrap(i as isize - k as isize)];
            let l = norm(sub(a, b));
            // perpendicular distance of p_i from the chord
            let d = if l > T::zero() {
                let u = sub(a, b);
                let w = sub(pts[i], b);
                (u[0] * w[1] - u[1] * w[0]).abs() / l
            } else {
                T::zero()
            };
            (l, d)
        };
        let (mut l_k, mut d_k) = chord(1);
        let mut k = 1usize;
        while k < k_cap {
            let (l_next, d_next) = chord(k + 1);
            if l_next < l_k {
                break; // chord stopped growing
            }
            let ratio_ok = if l_k > T::zero() && l_next > T::zero() {
                d_next / l_next >= d_k / l_k
            } else {
                true
            };
            if !ratio_ok {
                break;
            }
            l_k = l_next;
            d_k = d_next;
            k += 1;
        }
        support[i] = k;
        // k-cosine at the common arm length: 1 + cos(angle between arms),
        // 2 for a cusp, 0 for a straight run
        let a = sub(pts[wrap(i as isize + k_cos as isize)], pts[i]);
        let b = sub(pts[wrap(i as isize - k_cos as isize)], pts[i]);
        let (na, nb) = (norm(a), norm(b));
        measure[i] = if na > T::zero() && nb > T::zero() {
            T::one() + (a[0] * b[0] + a[1] * b[1]) / (na * nb)
        } else {
            T::zero()
        };
    }

    let straight = T::of(STRAIGHT_EPS);
    let tol = T::of(SUPPRESS_TOL);
    let mut keep: Vec<usize> = Vec::new();
    'points: for i in 0..n {
        if measure[i] <= straight {
            continue;
        }
        let window = (support[i] / 2).max(1);
        for off in 1..=window {
            for j in [wrap(i as isize + off as isize), wrap(i as isize - off as isize)] {
                if measure[j] > measure[i] + tol {
                    continue 'points;
                }
            }
        }
        keep.push(i);
    }

    if keep.len() < 4 {
        keep = extreme_points(pts);
    }
    keep
}

/// Fallback: the four axis-extreme vertices, padded to four distinct indices
/// if the loop is degenerate.
fn extreme_points<T: Real>(pts: &[[T; 2]]) -> Vec<usize> {
    let n = pts.len();
    let pick = |f: &dyn Fn(usize, usize) -> bool| -> usize {
        let mut best = 0;
        for i in 1..n {
            if f(i, best) {
                best = i;
            }
        }
        best
    };
    let mut idx = vec![
        pick(&|i, b| pts[i][0] < pts[b][0]),
        pick(&|i, b| pts[i][0] > pts[b][0]),
        pick(&|i, b| pts[i][1] < pts[b][1]),
        pick(&|i, b| pts[i][1] > pts[b][1]),
    ];
    idx.sort_unstable();
    idx.dedup();
    let mut at = 0;
    while idx.len() < 4 && idx.len() < n {
        let cand = at * n / 4;
        if !idx.contains(&cand) {
            idx.push(cand);
        }
        at += 1;
    }
    idx.sort_unstable();
    idx
}

/// Dominant-point subset of a closed polyline (vertices preserved).
pub fn simplify_loop<T: Real>(pts: &[[T; 2]]) -> Vec<[T; 2]> {
    dominant_points(pts).into_iter().map(|i| pts[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A square outline sampled densely along its edges.
    fn square(per_side: usize) -> Vec<[f64; 2]> {
        let mut pts = Vec::new();
        let step = 1.0 / per_side as f64;
        for k in 0..per_side {
            pts.push([k as f64 * step, 0.0]);
        }
        for k in 0..per_side {
            pts.push([1.0, k as f64 * step]);
        }
        for k in 0..per_side {
            pts.push([1.0 - k as f64 * step, 1.0]);
        }
        for k in 0..per_side {
            pts.push([0.0, 1.0 - k as f64 * step]);
        }
        pts
    }

    fn circle(n: usize) -> Vec<[f64; 2]> {
        (0..n)
            .map(|k| {
                let t = std::f64::consts::TAU * k as f64 / n as f64;
                [t.cos(), t.sin()]
            })
            .collect()
    }

    #[test]
    fn square_corners_are_the_dominant_points() {
        let per_side = 32;
        let pts = square(per_side);
        let idx = dominant_points(&pts);
        assert_eq!(idx.len(), 4, "got {idx:?}");
        let corners = [0, per_side, 2 * per_side, 3 * per_side];
        for (got, want) in idx.iter().zip(corners) {
            let d = (*got as isize - want as isize).abs();
            assert!(d <= 1, "corner at {got}, expected near {want}");
        }
    }

    #[test]
    fn circle_points_spread_evenly() {
        let pts = circle(256);
        let idx = dominant_points(&pts);
        assert!(idx.len() >= 4);
        let mut gaps: Vec<usize> = idx
            .windows(2)
            .map(|w| w[1] - w[0])
            .chain(std::iter::once(256 - idx.last().unwrap() + idx[0]))
            .collect();
        gaps.sort_unstable();
        let (min, max) = (gaps[0], *gaps.last().unwrap());
        assert!(
            max <= 3 * min.max(1),
            "gap spread too uneven: min {min}, max {max}, {} points",
            idx.len()
        );
    }

    #[test]
    fn output_is_a_subset_of_input() {
        let pts = circle(100);
        let out = simplify_loop(&pts);
        assert!(out.len() >= 4);
        for p in &out {
            assert!(pts.contains(p));
        }
    }

    #[test]
    fn degenerate_loops_fall_back_to_extremes() {
        // ellipse flattened to near-collinear: suppression over-prunes
        let pts: Vec<[f64; 2]> = (0..64)
            .map(|k| {
                let t = std::f64::consts::TAU * k as f64 / 64.0;
                [t.cos(), 1e-9 * t.sin()]
            })
            .collect();
        let idx = dominant_points(&pts);
        assert!(idx.len() >= 4);
    }
}
