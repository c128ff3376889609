//! Triangle meshes: OBJ I/O, marching-cubes extraction, capped-prism meshes
//! of extracted cylinder primitives, and area-weighted surface sampling.

pub mod mc;
mod mc_tables;

pub use mc::marching_cubes;

use crate::extract::{CadModel, PrimitiveRole};
use crate::geom;
use crate::rng;
use crate::scalar::Real;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("OBJ parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("mesh is empty or has zero surface area")]
    Degenerate,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default)]
pub struct TriangleMesh<T> {
    pub vertices: Vec<[T; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

impl<T: Real> TriangleMesh<T> {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_points(&self, t: usize) -> [[T; 3]; 3] {
        let [a, b, c] = self.triangles[t];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    /// Unnormalized right-hand normal (twice the area vector).
    pub fn raw_normal(&self, t: usize) -> [T; 3] {
        let [a, b, c] = self.triangle_points(t);
        geom::cross3(geom::sub3(b, a), geom::sub3(c, a))
    }

    pub fn area(&self) -> T {
        let half = T::of(0.5);
        (0..self.triangles.len()).fold(T::zero(), |acc, t| {
            acc + geom::norm3(self.raw_normal(t)) * half
        })
    }

    /// Divergence-theorem volume; positive for outward-wound surfaces.
    pub fn signed_volume(&self) -> T {
        let six = T::of(6.0);
        (0..self.triangles.len()).fold(T::zero(), |acc, t| {
            let [a, b, c] = self.triangle_points(t);
            acc + geom::dot3(a, geom::cross3(b, c)) / six
        })
    }

    /// Axis-aligned bounding box (min, max), if nonempty.
    pub fn bounds(&self) -> Option<([T; 3], [T; 3])> {
        let first = *self.vertices.first()?;
        let mut lo = first;
        let mut hi = first;
        for v in &self.vertices {
            for a in 0..3 {
                if v[a] < lo[a] {
                    lo[a] = v[a];
                }
                if v[a] > hi[a] {
                    hi[a] = v[a];
                }
            }
        }
        Some((lo, hi))
    }

    /// Append another mesh.
    pub fn extend(&mut self, other: &TriangleMesh<T>) {
        let base = self.vertices.len() as u32;
        self.vertices.extend_from_slice(&other.vertices);
        self.triangles.extend(
            other
                .triangles
                .iter()
                .map(|t| [t[0] + base, t[1] + base, t[2] + base]),
        );
    }

    /// Axis-aligned box; handy as ground truth in tests and demos.
    pub fn box_mesh(center: [T; 3], half: [T; 3]) -> Self {
        let sgn = [-T::one(), T::one()];
        let mut vertices = Vec::with_capacity(8);
        for &z in &sgn {
            for &y in &sgn {
                for &x in &sgn {
                    vertices.push([
                        center[0] + x * half[0],
                        center[1] + y * half[1],
                        center[2] + z * half[2],
                    ]);
                }
            }
        }
        // 12 triangles, outward winding
        let quads: [[u32; 4]; 6] = [
            [0, 2, 3, 1], // z-
            [4, 5, 7, 6], // z+
            [0, 1, 5, 4], // y-
            [2, 6, 7, 3], // y+
            [0, 4, 6, 2], // x-
            [1, 3, 7, 5], // x+
        ];
        let mut triangles = Vec::with_capacity(12);
        for q in quads {
            triangles.push([q[0], q[1], q[2]]);
            triangles.push([q[0], q[2], q[3]]);
        }
        Self {
            vertices,
            triangles,
        }
    }

    // ---- OBJ ---------------------------------------------------------------

    pub fn to_obj(&self) -> String {
        let mut out = String::new();
        for v in &self.vertices {
            out.push_str(&format!("v {:?} {:?} {:?}\n", v[0], v[1], v[2]));
        }
        for t in &self.triangles {
            out.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
        }
        out
    }

    pub fn from_obj(text: &str) -> Result<Self, MeshError> {
        let mut vertices = Vec::new();
        let mut triangles: Vec<[u32; 3]> = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("v") => {
                    let mut v = [T::zero(); 3];
                    for slot in v.iter_mut() {
                        let tok = parts.next().ok_or(MeshError::Parse {
                            line: ln + 1,
                            message: "vertex needs 3 coordinates".into(),
                        })?;
                        *slot = T::from_decimal(tok).ok_or(MeshError::Parse {
                            line: ln + 1,
                            message: format!("bad coordinate `{tok}`"),
                        })?;
                    }
                    vertices.push(v);
                }
                Some("f") => {
                    let idx: Vec<u32> = parts
                        .map(|tok| {
                            let first = tok.split('/').next().unwrap_or("");
                            first
                                .parse::<i64>()
                                .ok()
                                .filter(|&i| i > 0)
                                .map(|i| (i - 1) as u32)
                                .ok_or(MeshError::Parse {
                                    line: ln + 1,
                                    message: format!("bad face index `{tok}`"),
                                })
                        })
                        .collect::<Result<_, _>>()?;
                    if idx.len() < 3 {
                        return Err(MeshError::Parse {
                            line: ln + 1,
                            message: "face needs at least 3 indices".into(),
                        });
                    }
                    for k in 1..idx.len() - 1 {
                        triangles.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {} // comments, normals, texcoords
            }
        }
        let nv = vertices.len() as u32;
        if let Some(bad) = triangles.iter().flatten().find(|&&i| i >= nv) {
            return Err(MeshError::Parse {
                line: 0,
                message: format!("face index {} out of range ({nv} vertices)", bad + 1),
            });
        }
        Ok(Self {
            vertices,
            triangles,
        })
    }

    pub fn save_obj(&self, path: &Path) -> Result<(), MeshError> {
        std::fs::write(path, self.to_obj())?;
        Ok(())
    }

    pub fn load_obj(path: &Path) -> Result<Self, MeshError> {
        Self::from_obj(&std::fs::read_to_string(path)?)
    }
}

// ---------------------------------------------------------------------------
// Primitive prisms
// ---------------------------------------------------------------------------

/// A per-primitive prism mesh labeled by its CSG role.
#[derive(Debug)]
pub struct PrimitiveMesh<T> {
    pub primitive: usize,
    pub role: PrimitiveRole,
    pub mesh: TriangleMesh<T>,
}

/// Mesh every primitive of an extracted model as a capped prism: the loop
/// sampled at `curve_samples` points, caps ear-clipped, sides quads split in
/// two. Holes are not cut; subtractive primitives come out as their own
/// meshes labeled by role.
pub fn mesh_primitives<T: Real>(
    cad: &CadModel<T>,
    curve_samples: usize,
) -> (Vec<PrimitiveMesh<T>>, Vec<String>) {
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for prim in &cad.primitives {
        let head = &cad.heads[prim.head];
        let loop_ = &head.loops[prim.loop_index];
        let mut ring = loop_.spline.sample(curve_samples.max(3));
        // drop consecutive duplicates, keep CCW orientation for caps/sides
        ring.dedup_by(|a, b| a == b);
        if ring.len() >= 2 && ring.first() == ring.last() {
            ring.pop();
        }
        if ring.len() < 3 {
            warnings.push(format!("primitive {}: degenerate ring, skipped", prim.id));
            continue;
        }
        if crate::extract::contour::signed_area(&ring) < T::zero() {
            ring.reverse();
        }
        if polygon_self_intersects(&ring) {
            warnings.push(format!(
                "primitive {}: self-intersecting sampled polygon, skipped",
                prim.id
            ));
            continue;
        }
        let Some(cap) = ear_clip(&ring) else {
            warnings.push(format!("primitive {}: cap triangulation failed", prim.id));
            continue;
        };
        let n = ring.len() as u32;
        let h = prim.half_height;
        let mut vertices = Vec::with_capacity(2 * ring.len());
        for p in &ring {
            vertices.push(head.box_.to_world([p[0], p[1], -h]));
        }
        for p in &ring {
            vertices.push(head.box_.to_world([p[0], p[1], h]));
        }
        let mut triangles = Vec::new();
        // top cap (+z): CCW as clipped; bottom reversed
        for t in &cap {
            triangles.push([t[0] + n, t[1] + n, t[2] + n]);
            triangles.push([t[0], t[2], t[1]]);
        }
        for i in 0..n {
            let j = (i + 1) % n;
            triangles.push([i, j, j + n]);
            triangles.push([i, j + n, i + n]);
        }
        out.push(PrimitiveMesh {
            primitive: prim.id,
            role: prim.role,
            mesh: TriangleMesh {
                vertices,
                triangles,
            },
        });
    }
    (out, warnings)
}

fn segments_intersect<T: Real>(a: [T; 2], b: [T; 2], c: [T; 2], d: [T; 2]) -> bool {
    let orient = |p: [T; 2], q: [T; 2], r: [T; 2]| {
        (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])
    };
    let (o1, o2) = (orient(a, b, c), orient(a, b, d));
    let (o3, o4) = (orient(c, d, a), orient(c, d, b));
    (o1 * o2 < T::zero()) && (o3 * o4 < T::zero())
}

fn polygon_self_intersects<T: Real>(ring: &[[T; 2]]) -> bool {
    let n = ring.len();
    for i in 0..n {
        let (a, b) = (ring[i], ring[(i + 1) % n]);
        for j in i + 1..n {
            // skip adjacent segments
            if j == i || (j + 1) % n == i || (i + 1) % n == j {
                continue;
            }
            let (c, d) = (ring[j], ring[(j + 1) % n]);
            if segments_intersect(a, b, c, d) {
                return true;
            }
        }
    }
    false
}

/// Ear clipping of a simple CCW polygon; returns triangle index triples.
fn ear_clip<T: Real>(ring: &[[T; 2]]) -> Option<Vec<[u32; 3]>> {
    let n = ring.len();
    let mut idx: Vec<u32> = (0..n as u32).collect();
    let mut tris = Vec::with_capacity(n.saturating_sub(2));
    let cross = |o: [T; 2], a: [T; 2], b: [T; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let inside_tri = |p: [T; 2], a: [T; 2], b: [T; 2], c: [T; 2]| {
        let d1 = cross(a, b, p);
        let d2 = cross(b, c, p);
        let d3 = cross(c, a, p);
        d1 >= T::zero() && d2 >= T::zero() && d3 >= T::zero()
    };
    let mut guard = 0usize;
    while idx.len() > 3 {
        let m = idx.len();
        let mut clipped = false;
        for k in 0..m {
            let (ia, ib, ic) = (idx[(k + m - 1) % m], idx[k], idx[(k + 1) % m]);
            let (a, b, c) = (
                ring[ia as usize],
                ring[ib as usize],
                ring[ic as usize],
            );
            if cross(a, b, c) <= T::zero() {
                continue; // reflex or degenerate corner
            }
            let mut ear = true;
            for &other in &idx {
                if other == ia || other == ib || other == ic {
                    continue;
                }
                if inside_tri(ring[other as usize], a, b, c) {
                    ear = false;
                    break;
                }
            }
            if ear {
                tris.push([ia, ib, ic]);
                idx.remove(k);
                clipped = true;
                break;
            }
        }
        if !clipped {
            guard += 1;
            if guard > 1 {
                return None; // degenerate polygon
            }
            // tolerate one pass of exactly-collinear corners
            idx.retain(|_| true);
            let m = idx.len();
            let mut dropped = false;
            for k in 0..m {
                let (ia, ib, ic) = (idx[(k + m - 1) % m], idx[k], idx[(k + 1) % m]);
                if cross(
                    ring[ia as usize],
                    ring[ib as usize],
                    ring[ic as usize],
                ) == T::zero()
                {
                    idx.remove(k);
                    dropped = true;
                    break;
                }
            }
            if !dropped {
                return None;
            }
        }
    }
    if idx.len() == 3 {
        tris.push([idx[0], idx[1], idx[2]]);
    }
    Some(tris)
}

// ---------------------------------------------------------------------------
// Surface sampling
// ---------------------------------------------------------------------------

/// Area-weighted uniform surface samples with their (unit) triangle normals.
pub fn sample_surface<T: Real>(
    mesh: &TriangleMesh<T>,
    n: usize,
    seed: u64,
) -> Result<(Vec<[T; 3]>, Vec<[T; 3]>), MeshError> {
    if mesh.is_empty() {
        return Err(MeshError::Degenerate);
    }
    let mut cum = Vec::with_capacity(mesh.triangles.len());
    let mut total = T::zero();
    for t in 0..mesh.triangles.len() {
        total = total + geom::norm3(mesh.raw_normal(t));
        cum.push(total);
    }
    if !(total > T::zero()) {
        return Err(MeshError::Degenerate);
    }
    let mut r = rng::stream(seed, 0);
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng::unit::<T>(&mut r) * total;
        let t = cum.partition_point(|&c| c <= u).min(cum.len() - 1);
        let [a, b, c] = mesh.triangle_points(t);
        let (u1, u2): (T, T) = (rng::unit(&mut r), rng::unit(&mut r));
        let su1 = u1.sqrt();
        let (wa, wb, wc) = (T::one() - su1, su1 * (T::one() - u2), su1 * u2);
        points.push([
            wa * a[0] + wb * b[0] + wc * c[0],
            wa * a[1] + wb * b[1] + wc * c[1],
            wa * a[2] + wb * b[2] + wc * c[2],
        ]);
        let nrm = mesh.raw_normal(t);
        let len = geom::norm3(nrm);
        normals.push(geom::scale3(nrm, T::one() / len));
    }
    Ok((points, normals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::bspline::fit_closed;
    use crate::extract::{BsplineLoop, CsgNode, HeadExtraction, ProfileRaster};
    use crate::model::ExtrusionBox;

    #[test]
    fn obj_round_trip() {
        let mesh: TriangleMesh<f64> = TriangleMesh::box_mesh([0.0; 3], [0.25; 3]);
        let text = mesh.to_obj();
        assert!(text.starts_with("v "));
        assert!(text.contains("\nf 1 "));
        let back = TriangleMesh::<f64>::from_obj(&text).unwrap();
        assert_eq!(back.vertices, mesh.vertices);
        assert_eq!(back.triangles, mesh.triangles);
        // box volume positive with outward winding
        assert!((mesh.signed_volume() - 0.125).abs() < 1e-12);
        // slashed face indices parse
        let obj = "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1/1 2/2/2 3//3\n";
        let m = TriangleMesh::<f64>::from_obj(obj).unwrap();
        assert_eq!(m.triangles, vec![[0, 1, 2]]);
        assert!(TriangleMesh::<f64>::from_obj("f 1 2 9\nv 0 0 0\n").is_err());
    }

    fn circle_head(r: f64, h: f64) -> (HeadExtraction<f64>, CadModel<f64>) {
        let pts: Vec<[f64; 2]> = (0..64)
            .map(|k| {
                let t = std::f64::consts::TAU * k as f64 / 64.0;
                [r * t.cos(), r * t.sin()]
            })
            .collect();
        let spline = fit_closed(&pts, 1e-8).unwrap().spline;
        let head = HeadExtraction {
            head: 0,
            box_: ExtrusionBox {
                size: [0.5, 0.5, h],
                center: [0.0; 3],
                quat: [1.0, 0.0, 0.0, 0.0],
            },
            raster: ProfileRaster {
                res: 16,
                values: vec![1.0; 256],
                half_l: 0.3,
                half_w: 0.3,
            },
            hierarchy: Default::default(),
            loops: vec![BsplineLoop { spline, depth: 0 }],
        };
        let heads = vec![head.clone()];
        let (primitives, tree) = crate::extract::assemble(&heads);
        (
            head,
            CadModel {
                heads,
                primitives,
                tree,
                warnings: Vec::new(),
            },
        )
    }

    #[test]
    fn circular_prism_volume_matches_analytic() {
        let (r, h) = (0.2, 0.15);
        let (_, cad) = circle_head(r, h);
        let (meshes, warnings) = mesh_primitives(&cad, 128);
        assert!(warnings.is_empty(), "{warnings:?}");
        assert_eq!(meshes.len(), 1);
        let vol = meshes[0].mesh.signed_volume();
        let expect = 2.0 * std::f64::consts::PI * r * r * h;
        assert!(
            (vol - expect).abs() / expect < 0.02,
            "volume {vol} vs {expect}"
        );
    }

    #[test]
    fn square_prism_triangle_counts() {
        // square control polygon sampled at 4 points: ring of 4 vertices →
        // ear-clipped caps (2 each) and 4 side quads split in two
        let square: Vec<[f64; 2]> = vec![[0.2, 0.2], [-0.2, 0.2], [-0.2, -0.2], [0.2, -0.2]];
        let spline = crate::extract::bspline::PeriodicBspline {
            control: square.clone(),
        };
        let head = HeadExtraction {
            head: 0,
            box_: ExtrusionBox {
                size: [0.5, 0.5, 0.1],
                center: [0.0; 3],
                quat: [1.0, 0.0, 0.0, 0.0],
            },
            raster: ProfileRaster {
                res: 16,
                values: vec![1.0; 256],
                half_l: 0.3,
                half_w: 0.3,
            },
            hierarchy: Default::default(),
            loops: vec![BsplineLoop { spline, depth: 0 }],
        };
        let heads = vec![head];
        let (primitives, tree) = crate::extract::assemble(&heads);
        let cad = CadModel {
            heads,
            primitives,
            tree,
            warnings: Vec::new(),
        };
        let (meshes, _) = mesh_primitives(&cad, 4);
        assert_eq!(meshes.len(), 1);
        let m = &meshes[0].mesh;
        assert_eq!(m.vertices.len(), 8);
        // 2+2 cap triangles + 4 quads × 2
        assert_eq!(m.triangles.len(), 12);
        for t in 0..m.triangles.len() {
            assert!(geom::norm3(m.raw_normal(t)) > 0.0, "zero-area triangle");
        }
    }

    #[test]
    fn empty_tree_meshes_to_nothing() {
        let cad: CadModel<f64> = CadModel {
            heads: Vec::new(),
            primitives: Vec::new(),
            tree: None,
            warnings: Vec::new(),
        };
        let (meshes, warnings) = mesh_primitives(&cad, 64);
        assert!(meshes.is_empty() && warnings.is_empty());
        assert_eq!(cad.tree.as_ref().map(CsgNode::leaf_count), None);
    }

    #[test]
    fn surface_sampling_is_area_weighted_and_deterministic() {
        // unit square split into two equal triangles
        let mesh = TriangleMesh::<f64> {
            vertices: vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [1.0, 1.0, 0.0],
                [0.0, 1.0, 0.0],
            ],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
        };
        let n = 20000;
        let (pts, nrm) = sample_surface(&mesh, n, 9).unwrap();
        let (pts2, _) = sample_surface(&mesh, n, 9).unwrap();
        assert_eq!(pts, pts2);
        for v in &nrm {
            assert!((geom::norm3(*v) - 1.0).abs() < 1e-12);
        }
        // points below the diagonal belong to triangle 0
        let below = pts.iter().filter(|p| p[1] < p[0]).count() as f64;
        let sigma = (0.25 * n as f64).sqrt();
        assert!(
            (below - n as f64 / 2.0).abs() < 3.0 * sigma,
            "triangle imbalance: {below} of {n}"
        );
    }

    #[test]
    fn zero_area_mesh_rejected() {
        let mesh = TriangleMesh::<f64> {
            vertices: vec![[0.0; 3], [0.0; 3], [0.0; 3]],
            triangles: vec![[0, 1, 2]],
        };
        assert!(matches!(
            sample_surface(&mesh, 10, 0),
            Err(MeshError::Degenerate)
        ));
    }
}
