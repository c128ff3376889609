//! Streaming marching cubes over a callable field on [-0.5, 0.5]³: standard
//! 256-case tables, linear edge interpolation, shared vertices keyed by
//! lattice edge (watertight when the iso-surface avoids the domain boundary).

use super::mc_tables as tables;
use super::TriangleMesh;
use crate::scalar::Real;
use rayon::prelude::*;
use std::collections::HashMap;
use tables::{CORNER_OFFSETS, EDGE_CORNERS, TRI_TABLE};

/// Extract the iso-surface of `field` sampled on a (res+1)³ lattice.
/// `inside_below` selects the inside convention: true for SDF-like fields
/// (inside < iso), false for occupancy (inside > iso).
pub fn marching_cubes<T, F>(field: F, iso: T, res: usize, inside_below: bool) -> TriangleMesh<T>
where
    T: Real,
    F: Fn([T; 3]) -> T + Sync,
{
    assert!(res >= 8, "marching cubes needs res ≥ 8");
    let n = res + 1;
    let coord = |i: usize| T::of(-0.5 + i as f64 / res as f64);
    let sign = if inside_below { T::one() } else { -T::one() };
    let eval_plane = |k: usize| -> Vec<T> {
        let z = coord(k);
        let mut plane = vec![T::zero(); n * n];
        plane
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(j, row)| {
                let y = coord(j);
                for (i, slot) in row.iter_mut().enumerate() {
                    *slot = sign * (field([coord(i), y, z]) - iso);
                }
            });
        plane
    };

    let mut vertices: Vec<[T; 3]> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    // lattice-edge key: (ix, iy, iz, axis)
    let mut edge_cache: HashMap<(u32, u32, u32, u8), u32> = HashMap::new();

    let mut below = eval_plane(0);
    for k in 0..res {
        let above = eval_plane(k + 1);
        let plane_of = |dz: usize| -> &Vec<T> { if dz == 0 { &below } else { &above } };
        for j in 0..res {
            for i in 0..res {
                let mut values = [T::zero(); 8];
                let mut case = 0usize;
                for (c, off) in CORNER_OFFSETS.iter().enumerate() {
                    let v = plane_of(off[2])[(j + off[1]) * n + (i + off[0])];
                    values[c] = v;
                    if v < T::zero() {
                        case |= 1 << c;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                let tri = &TRI_TABLE[case];
                let mut t = 0;
                while tri[t] >= 0 {
                    let mut idx = [0u32; 3];
                    for (slot, &e) in idx.iter_mut().zip(&tri[t..t + 3]) {
                        let e = e as usize;
                        let [c0, c1] = EDGE_CORNERS[e];
                        let o0 = CORNER_OFFSETS[c0];
                        let o1 = CORNER_OFFSETS[c1];
                        // canonical key: edge base corner + axis
                        let axis = (0..3).find(|&a| o0[a] != o1[a]).unwrap();
                        let base = [
                            i + o0[0].min(o1[0]),
                            j + o0[1].min(o1[1]),
                            k + o0[2].min(o1[2]),
                        ];
                        let key = (base[0] as u32, base[1] as u32, base[2] as u32, axis as u8);
                        *slot = *edge_cache.entry(key).or_insert_with(|| {
                            // identical t from either adjacent cell: computed
                            // from the canonical low→high corner values
                            let (vl, vh) = if o0[axis] < o1[axis] {
                                (values[c0], values[c1])
                            } else {
                                (values[c1], values[c0])
                            };
                            let tt = vl / (vl - vh);
                            let mut p = [coord(base[0]), coord(base[1]), coord(base[2])];
                            p[axis] = p[axis]
                                + tt * (coord(base[axis] + 1) - coord(base[axis]));
                            let id = vertices.len() as u32;
                            vertices.push(p);
                            id
                        });
                    }
                    // the tables wind triangles clockwise when seen from
                    // outside under our inside<0 convention; flip for
                    // outward right-hand normals
                    triangles.push([idx[0], idx[2], idx[1]]);
                    t += 3;
                }
            }
        }
        below = above;
    }
    TriangleMesh {
        vertices,
        triangles,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn sphere_mesh(r: f64, res: usize) -> TriangleMesh<f64> {
        marching_cubes(
            |p: [f64; 3]| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - r,
            0.0,
            res,
            true,
        )
    }

    #[test]
    fn sphere_area_and_euler_characteristic() {
        let r = 0.3;
        let mesh = sphere_mesh(r, 128);
        let area = mesh.area();
        let expect = 4.0 * std::f64::consts::PI * r * r;
        assert!(
            (area - expect).abs() / expect < 0.02,
            "area {area} vs {expect}"
        );
        // V − E + F = 2 for a watertight genus-0 surface
        let mut edges: HashSet<(u32, u32)> = HashSet::new();
        for t in &mesh.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                edges.insert((a.min(b), a.max(b)));
            }
        }
        let euler =
            mesh.vertices.len() as i64 - edges.len() as i64 + mesh.triangles.len() as i64;
        assert_eq!(euler, 2);
    }

    #[test]
    fn sphere_normals_point_outward() {
        let mesh = sphere_mesh(0.3, 64);
        // divergence theorem: signed volume positive for outward winding
        let vol = mesh.signed_volume();
        let expect = 4.0 / 3.0 * std::f64::consts::PI * 0.027;
        assert!(vol > 0.0, "winding inverted (volume {vol})");
        assert!((vol - expect).abs() / expect < 0.05, "{vol} vs {expect}");
    }

    #[test]
    fn vertices_stay_near_the_iso_surface() {
        let r = 0.3;
        let mesh = sphere_mesh(r, 64);
        let cell = 1.0 / 64.0;
        for v in &mesh.vertices {
            let rho = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            assert!((rho - r).abs() < cell, "vertex off-surface by {}", rho - r);
        }
    }

    #[test]
    fn constant_field_yields_empty_mesh() {
        let mesh = marching_cubes(|_: [f64; 3]| 1.0, 0.0, 16, true);
        assert!(mesh.vertices.is_empty() && mesh.triangles.is_empty());
    }

    #[test]
    fn occupancy_convention_matches_sdf_convention() {
        let r = 0.25;
        let sdf = sphere_mesh(r, 32);
        // occupancy: 1 inside, 0 outside, iso 0.5, inside above the iso
        let occ = marching_cubes(
            |p: [f64; 3]| {
                if (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() < r {
                    1.0
                } else {
                    0.0
                }
            },
            0.5,
            32,
            false,
        );
        assert!(!occ.triangles.is_empty());
        let (va, vb) = (sdf.signed_volume(), occ.signed_volume());
        assert!(vb > 0.0);
        assert!((va - vb).abs() / va < 0.2, "{va} vs {vb}");
    }
}
