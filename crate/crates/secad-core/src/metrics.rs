//! Reconstruction metrics: symmetric squared chamfer distance (×1000),
//! normal consistency, edge chamfer distance (×100) over detected sharp-edge
//! points, and the primitive count. Nearest neighbors run on a uniform
//! spatial hash grid whose results are pinned to the brute-force oracle.

use crate::extract::CsgNode;
use crate::geom;
use crate::mesh::{sample_surface, MeshError, TriangleMesh};
use crate::scalar::Real;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, bound = "")]
pub struct MetricsConfig<T: Real> {
    /// Close-to-edge neighborhood radius.
    pub d: T,
    /// Normal dot-product sharpness threshold.
    pub tau: T,
    /// Surface samples for CD and NC.
    pub n_cd: usize,
    /// Surface samples for ECD edge detection.
    pub n_ecd: usize,
    pub seed: u64,
}

impl<T: Real> Default for MetricsConfig<T> {
    fn default() -> Self {
        Self {
            d: T::of(0.01),
            tau: T::of(0.1),
            n_cd: 8192,
            n_ecd: 12000,
            seed: 0,
        }
    }
}

/// Evaluation summary; `ecd` is None when either mesh has no detected edge
/// points (`ecd_no_edges` then says which is to blame is irrelevant — the
/// sentinel is never silently zero).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct MetricsReport<T: Real> {
    pub cd: T,
    pub ecd: Option<T>,
    pub ecd_no_edges: bool,
    pub nc: T,
    pub p_count: Option<usize>,
    pub config: MetricsConfig<T>,
}

// ---------------------------------------------------------------------------
// Spatial hash nearest neighbors
// ---------------------------------------------------------------------------

/// Uniform spatial hash over a point set, sized to the expected spacing.
pub struct PointGrid<'a, T> {
    points: &'a [[T; 3]],
    origin: [T; 3],
    cell: T,
    dims: [usize; 3],
    starts: Vec<u32>,
    items: Vec<u32>,
}

impl<'a, T: Real> PointGrid<'a, T> {
    pub fn build(points: &'a [[T; 3]]) -> Self {
        assert!(!points.is_empty());
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            for a in 0..3 {
                if p[a] < lo[a] {
                    lo[a] = p[a];
                }
                if p[a] > hi[a] {
                    hi[a] = p[a];
                }
            }
        }
        let extent = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
        let vol = extent.iter().fold(T::one(), |a, &e| {
            a * crate::scalar::fmax(e, T::of(1e-6))
        });
        let cell = crate::scalar::fmax(
            (vol / T::of(points.len() as f64)).powf(T::of(1.0 / 3.0)),
            T::of(1e-6),
        );
        let dim_of = |e: T| -> usize {
            (e / cell)
                .floor()
                .to_f64()
                .map(|v| v as usize + 1)
                .unwrap_or(1)
                .max(1)
        };
        let dims = [dim_of(extent[0]), dim_of(extent[1]), dim_of(extent[2])];
        let ncells = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0u32; ncells + 1];
        let cell_of = |p: &[T; 3]| -> usize {
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let u = ((p[a] - lo[a]) / cell)
                    .floor()
                    .to_f64()
                    .map(|v| v as isize)
                    .unwrap_or(0);
                idx[a] = u.clamp(0, dims[a] as isize - 1) as usize;
            }
            (idx[2] * dims[1] + idx[1]) * dims[0] + idx[0]
        };
        for p in points {
            counts[cell_of(p) + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let starts = counts.clone();
        let mut fill = counts;
        let mut items = vec![0u32; points.len()];
        for (i, p) in points.iter().enumerate() {
            let c = cell_of(p);
            items[fill[c] as usize] = i as u32;
            fill[c] += 1;
        }
        Self {
            points,
            origin: lo,
            cell,
            dims,
            starts,
            items,
        }
    }

    fn cell_index(&self, p: &[T; 3]) -> [isize; 3] {
        let mut idx = [0isize; 3];
        for a in 0..3 {
            idx[a] = ((p[a] - self.origin[a]) / self.cell)
                .floor()
                .to_f64()
                .map(|v| v as isize)
                .unwrap_or(0);
        }
        idx
    }

    fn scan_cell(&self, c: [isize; 3], q: &[T; 3], best: &mut (u32, T)) {
        for a in 0..3 {
            if c[a] < 0 || c[a] >= self.dims[a] as isize {
                return;
            }
        }
        let lin = ((c[2] as usize * self.dims[1] + c[1] as usize) * self.dims[0]) + c[0] as usize;
        let (s, e) = (self.starts[lin] as usize, self.starts[lin + 1] as usize);
        for &i in &self.items[s..e] {
            let p = self.points[i as usize];
            let d2 = dist2(*q, p);
            if d2 < best.1 || (d2 == best.1 && i < best.0) {
                *best = (i, d2);
            }
        }
    }

    /// Exact nearest neighbor: (index, squared distance).
    pub fn nearest(&self, q: &[T; 3]) -> (usize, T) {
        let home = self.cell_index(q);
        let mut best = (u32::MAX, T::infinity());
        let max_ring = self.dims.iter().max().copied().unwrap_or(1) as isize + 1;
        let mut ring = 0isize;
        loop {
            if ring == 0 {
                self.scan_cell(home, q, &mut best);
            } else {
                // shell of Chebyshev radius `ring`
                for dz in -ring..=ring {
                    for dy in -ring..=ring {
                        for dx in -ring..=ring {
                            if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                                continue;
                            }
                            self.scan_cell(
                                [home[0] + dx, home[1] + dy, home[2] + dz],
                                q,
                                &mut best,
                            );
                        }
                    }
                }
            }
            // any point in shell k+1 is at least k cells away
            let safe = T::of(ring as f64) * self.cell;
            if best.1 <= safe * safe || ring > max_ring {
                break;
            }
            ring += 1;
        }
        (best.0 as usize, best.1)
    }

    /// Visit all points (by index) within `radius` of q.
    pub fn for_each_within(&self, q: &[T; 3], radius: T, mut f: impl FnMut(usize, T)) {
        let home = self.cell_index(q);
        let r2 = radius * radius;
        let rings = (radius / self.cell)
            .ceil()
            .to_f64()
            .map(|v| v as isize)
            .unwrap_or(0)
            + 1;
        for dz in -rings..=rings {
            for dy in -rings..=rings {
                for dx in -rings..=rings {
                    let c = [home[0] + dx, home[1] + dy, home[2] + dz];
                    let mut ok = true;
                    for a in 0..3 {
                        if c[a] < 0 || c[a] >= self.dims[a] as isize {
                            ok = false;
                        }
                    }
                    if !ok {
                        continue;
                    }
                    let lin = ((c[2] as usize * self.dims[1] + c[1] as usize) * self.dims[0])
                        + c[0] as usize;
                    let (s, e) = (self.starts[lin] as usize, self.starts[lin + 1] as usize);
                    for &i in &self.items[s..e] {
                        let d2 = dist2(*q, self.points[i as usize]);
                        if d2 <= r2 {
                            f(i as usize, d2);
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn dist2<T: Real>(a: [T; 3], b: [T; 3]) -> T {
    let d = geom::sub3(a, b);
    geom::dot3(d, d)
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Symmetric squared chamfer distance, scaled by 1000.
pub fn chamfer<T: Real>(p: &[[T; 3]], g: &[[T; 3]]) -> Result<T, MeshError> {
    if p.is_empty() || g.is_empty() {
        return Err(MeshError::Degenerate);
    }
    let gp = PointGrid::build(p);
    let gg = PointGrid::build(g);
    let mean_min = |from: &[[T; 3]], grid: &PointGrid<T>| -> T {
        let mut acc = T::zero();
        for q in from {
            acc = acc + grid.nearest(q).1;
        }
        acc / T::of(from.len() as f64)
    };
    Ok((mean_min(p, &gg) + mean_min(g, &gp)) * T::of(1000.0))
}

/// Brute-force O(nm) chamfer; the oracle the hash grid is tested against.
pub fn chamfer_brute<T: Real>(p: &[[T; 3]], g: &[[T; 3]]) -> Result<T, MeshError> {
    if p.is_empty() || g.is_empty() {
        return Err(MeshError::Degenerate);
    }
    let mean_min = |from: &[[T; 3]], to: &[[T; 3]]| -> T {
        let mut acc = T::zero();
        for q in from {
            let mut best = T::infinity();
            for r in to {
                let d2 = dist2(*q, *r);
                if d2 < best {
                    best = d2;
                }
            }
            acc = acc + best;
        }
        acc / T::of(from.len() as f64)
    };
    Ok((mean_min(p, g) + mean_min(g, p)) * T::of(1000.0))
}

/// Bidirectional nearest-neighbor normal agreement, averaged and halved;
/// the signed dot product is kept as-is.
pub fn normal_consistency<T: Real>(
    p: &[[T; 3]],
    pn: &[[T; 3]],
    g: &[[T; 3]],
    gn: &[[T; 3]],
) -> Result<T, MeshError> {
    if p.is_empty() || g.is_empty() {
        return Err(MeshError::Degenerate);
    }
    assert_eq!(p.len(), pn.len());
    assert_eq!(g.len(), gn.len());
    let gp = PointGrid::build(p);
    let gg = PointGrid::build(g);
    let mean_dot = |from: &[[T; 3]],
                    fn_: &[[T; 3]],
                    grid: &PointGrid<T>,
                    to_n: &[[T; 3]]| {
        let mut acc = T::zero();
        for (q, n) in from.iter().zip(fn_) {
            let (idx, _) = grid.nearest(q);
            acc = acc + geom::dot3(*n, to_n[idx]);
        }
        acc / T::of(from.len() as f64)
    };
    Ok((mean_dot(p, pn, &gg, gn) + mean_dot(g, gn, &gp, pn)) / T::of(2.0))
}

/// Brute-force normal consistency oracle.
pub fn normal_consistency_brute<T: Real>(
    p: &[[T; 3]],
    pn: &[[T; 3]],
    g: &[[T; 3]],
    gn: &[[T; 3]],
) -> Result<T, MeshError> {
    if p.is_empty() || g.is_empty() {
        return Err(MeshError::Degenerate);
    }
    let mean_dot = |from: &[[T; 3]], fn_: &[[T; 3]], to: &[[T; 3]], to_n: &[[T; 3]]| {
        let mut acc = T::zero();
        for (q, n) in from.iter().zip(fn_) {
            let mut best = (0usize, T::infinity());
            for (i, r) in to.iter().enumerate() {
                let d2 = dist2(*q, *r);
                if d2 < best.1 {
                    best = (i, d2);
                }
            }
            acc = acc + geom::dot3(*n, to_n[best.0]);
        }
        acc / T::of(from.len() as f64)
    };
    Ok((mean_dot(p, pn, g, gn) + mean_dot(g, gn, p, pn)) / T::of(2.0))
}

/// Close-to-edge subset: points with a neighbor within radius `d` whose
/// normal dot product falls below `tau`.
pub fn edge_subset<T: Real>(
    points: &[[T; 3]],
    normals: &[[T; 3]],
    d: T,
    tau: T,
) -> Vec<[T; 3]> {
    let grid = PointGrid::build(points);
    let mut out = Vec::new();
    for (i, (q, n)) in points.iter().zip(normals).enumerate() {
        let mut sharp = false;
        grid.for_each_within(q, d, |j, _| {
            if j != i && geom::dot3(*n, normals[j]) < tau {
                sharp = true;
            }
        });
        if sharp {
            out.push(*q);
        }
    }
    out
}

/// Edge chamfer outcome: either a value or the explicit no-edges sentinel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EcdOutcome<T> {
    Value(T),
    NoEdges { pred_empty: bool, gt_empty: bool },
}

/// Edge chamfer distance ×100 over detected sharp-edge points of two meshes.
pub fn edge_chamfer<T: Real>(
    pred: &TriangleMesh<T>,
    gt: &TriangleMesh<T>,
    cfg: &MetricsConfig<T>,
) -> Result<EcdOutcome<T>, MeshError> {
    let (pp, pn) = sample_surface(pred, cfg.n_ecd, crate::rng::mix_seed(&[cfg.seed, 2]))?;
    let (gp, gn) = sample_surface(gt, cfg.n_ecd, crate::rng::mix_seed(&[cfg.seed, 3]))?;
    let pe = edge_subset(&pp, &pn, cfg.d, cfg.tau);
    let ge = edge_subset(&gp, &gn, cfg.d, cfg.tau);
    if pe.is_empty() || ge.is_empty() {
        return Ok(EcdOutcome::NoEdges {
            pred_empty: pe.is_empty(),
            gt_empty: ge.is_empty(),
        });
    }
    // chamfer() scales by 1000; the edge variant reports ×100
    Ok(EcdOutcome::Value(chamfer(&pe, &ge)? / T::of(10.0)))
}

/// Number of leaf primitives in a post-processed tree.
pub fn primitive_count(tree: Option<&CsgNode>) -> usize {
    tree.map(|t| t.leaf_count()).unwrap_or(0)
}

/// Full mesh-vs-mesh evaluation.
pub fn evaluate_meshes<T: Real>(
    pred: &TriangleMesh<T>,
    gt: &TriangleMesh<T>,
    cfg: &MetricsConfig<T>,
    p_count: Option<usize>,
) -> Result<MetricsReport<T>, MeshError> {
    let (pp, pn) = sample_surface(pred, cfg.n_cd, crate::rng::mix_seed(&[cfg.seed, 0]))?;
    let (gp, gn) = sample_surface(gt, cfg.n_cd, crate::rng::mix_seed(&[cfg.seed, 1]))?;
    let cd = chamfer(&pp, &gp)?;
    let nc = normal_consistency(&pp, &pn, &gp, &gn)?;
    let (ecd, no_edges) = match edge_chamfer(pred, gt, cfg)? {
        EcdOutcome::Value(v) => (Some(v), false),
        EcdOutcome::NoEdges { .. } => (None, true),
    };
    Ok(MetricsReport {
        cd,
        ecd,
        ecd_no_edges: no_edges,
        nc,
        p_count,
        config: *cfg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_cloud(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut r = rng::stream(seed, 0);
        (0..n)
            .map(|_| {
                [
                    rng::uniform(&mut r, -0.5, 0.5),
                    rng::uniform(&mut r, -0.5, 0.5),
                    rng::uniform(&mut r, -0.5, 0.5),
                ]
            })
            .collect()
    }

    #[test]
    fn chamfer_spot_values() {
        let p = random_cloud(64, 1);
        assert_eq!(chamfer(&p, &p).unwrap(), 0.0);
        let a: Vec<[f64; 3]> = vec![[0.0, 0.0, 0.0]];
        let b = vec![[1.0, 0.0, 0.0]];
        assert!((chamfer(&a, &b).unwrap() - 2000.0).abs() < 1e-12);
        assert!(chamfer(&a, &[]).is_err());
    }

    #[test]
    fn accelerated_chamfer_equals_brute_force() {
        let p = random_cloud(512, 3);
        let g = random_cloud(512, 4);
        let fast = chamfer(&p, &g).unwrap();
        let brute = chamfer_brute(&p, &g).unwrap();
        assert!((fast - brute).abs() < 1e-12, "{fast} vs {brute}");
        // symmetry by construction
        let swapped = chamfer(&g, &p).unwrap();
        assert_eq!(fast.to_bits(), swapped.to_bits());
    }

    #[test]
    fn normal_consistency_identity_and_flip() {
        let p = random_cloud(256, 7);
        let n: Vec<[f64; 3]> = p
            .iter()
            .map(|q| {
                let l = geom::norm3(*q).max(1e-9);
                geom::scale3(*q, 1.0 / l)
            })
            .collect();
        let nc = normal_consistency(&p, &n, &p, &n).unwrap();
        assert!((nc - 1.0).abs() < 1e-12);
        let flipped: Vec<[f64; 3]> = n.iter().map(|v| geom::scale3(*v, -1.0)).collect();
        let nc = normal_consistency(&p, &n, &p, &flipped).unwrap();
        assert!((nc + 1.0).abs() < 1e-12);
    }

    #[test]
    fn accelerated_nc_equals_brute_force() {
        let p = random_cloud(300, 9);
        let g = random_cloud(300, 10);
        let mk_normals = |pts: &[[f64; 3]], s: u64| -> Vec<[f64; 3]> {
            let mut r = rng::stream(s, 0);
            pts.iter()
                .map(|_| {
                    let v: [f64; 3] = [
                        rng::uniform(&mut r, -1.0, 1.0),
                        rng::uniform(&mut r, -1.0, 1.0),
                        rng::uniform(&mut r, -1.0, 1.0),
                    ];
                    geom::scale3(v, 1.0 / geom::norm3(v).max(1e-9))
                })
                .collect()
        };
        let (pn, gn) = (mk_normals(&p, 11), mk_normals(&g, 12));
        let fast = normal_consistency(&p, &pn, &g, &gn).unwrap();
        let brute = normal_consistency_brute(&p, &pn, &g, &gn).unwrap();
        assert!((fast - brute).abs() < 1e-12);
    }

    #[test]
    fn flat_patches_at_an_angle() {
        // same xy grid positions; patch B rotated by θ about the x axis
        let theta = 0.7f64;
        let mut pa = Vec::new();
        let mut pb = Vec::new();
        for j in 0..24 {
            for i in 0..24 {
                let (x, y) = (i as f64 / 24.0, j as f64 / 24.0);
                pa.push([x, y, 0.0]);
                pb.push([x, y * theta.cos(), y * theta.sin()]);
            }
        }
        let na = vec![[0.0, 0.0, 1.0]; pa.len()];
        let nb = vec![[0.0, -theta.sin(), theta.cos()]; pb.len()];
        let nc = normal_consistency(&pa, &na, &pb, &nb).unwrap();
        assert!((nc - theta.cos()).abs() < 0.02, "nc {nc} vs {}", theta.cos());
    }

    #[test]
    fn edge_detection_cube_vs_sphere() {
        let cube: TriangleMesh<f64> = TriangleMesh::box_mesh([0.0; 3], [0.25; 3]);
        let cfg = MetricsConfig::default();
        match edge_chamfer(&cube, &cube, &cfg).unwrap() {
            EcdOutcome::Value(v) => assert!(v < 0.05, "self ECD {v}"),
            other => panic!("expected edges on a cube, got {other:?}"),
        }
        let sphere = crate::mesh::marching_cubes(
            |p: [f64; 3]| geom::norm3(p) - 0.3,
            0.0,
            48,
            true,
        );
        match edge_chamfer(&sphere, &cube, &cfg).unwrap() {
            EcdOutcome::NoEdges { pred_empty, .. } => assert!(pred_empty),
            other => panic!("sphere should have no sharp edges, got {other:?}"),
        }
    }

    #[test]
    fn translated_cube_ecd_is_positive_and_bounded() {
        let a: TriangleMesh<f64> = TriangleMesh::box_mesh([0.0; 3], [0.25; 3]);
        let b: TriangleMesh<f64> = TriangleMesh::box_mesh([0.1, 0.0, 0.0], [0.25; 3]);
        let cfg = MetricsConfig::default();
        match edge_chamfer(&a, &b, &cfg).unwrap() {
            EcdOutcome::Value(v) => {
                // nearest edge pairs sit between 0 and the 0.1 shift:
                // ECD ≤ 2·(0.1²)·100 = 2 with slack for sampling noise
                assert!(v > 0.0 && v < 2.1, "ECD {v}");
            }
            other => panic!("expected a value, got {other:?}"),
        }
    }

    #[test]
    fn edge_detection_monotone_in_tau() {
        let cube: TriangleMesh<f64> = TriangleMesh::box_mesh([0.0; 3], [0.25; 3]);
        let (p, n) = sample_surface(&cube, 6000, 5).unwrap();
        let loose = edge_subset(&p, &n, 0.01, 0.5).len();
        let tight = edge_subset(&p, &n, 0.01, 0.1).len();
        assert!(tight <= loose, "lowering tau must not add edge points");
        assert!(tight > 0);
    }

    #[test]
    fn report_serializes_with_sentinel() {
        let cfg: MetricsConfig<f64> = MetricsConfig::default();
        let report = MetricsReport {
            cd: 0.5,
            ecd: None,
            ecd_no_edges: true,
            nc: 0.9,
            p_count: Some(3),
            config: cfg,
        };
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"ecd\":null"));
        assert!(json.contains("\"ecd_no_edges\":true"));
        let back: MetricsReport<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(back.ecd, None);
        assert_eq!(back.p_count, Some(3));
    }

    #[test]
    fn primitive_count_of_trees() {
        assert_eq!(primitive_count(None), 0);
        let t = CsgNode::Difference(Box::new(CsgNode::Leaf(0)), Box::new(CsgNode::Leaf(1)));
        assert_eq!(primitive_count(Some(&t)), 2);
    }
}
