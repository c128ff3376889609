//! Binary voxel grids: SECV file I/O, synthetic shape generation, occupancy
//! lookups, and occupancy-labeled point sampling.
//!
//! The world frame is the axis-aligned cube [-0.5, 0.5]³; the center of
//! voxel (i, j, k) sits at `-0.5 + (i + 0.5)/dim` per axis, x-fastest.

use crate::rng;
use crate::scalar::Real;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SECV_MAGIC: &[u8; 4] = b"SECV";
pub const SECV_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum VoxelError {
    #[error("bad magic at byte offset 0 (expected \"SECV\")")]
    BadMagic,
    #[error("unsupported format version {0} at byte offset 4")]
    BadVersion(u8),
    #[error("dim {0} outside [2, 512] at byte offset 5")]
    BadDim(u32),
    #[error("truncated payload: need {need} bytes, got {got} (failed at byte offset {offset})")]
    Truncated {
        need: usize,
        got: usize,
        offset: usize,
    },
    #[error("occupancy byte {value} at byte offset {offset} is not 0 or 1")]
    BadOccupancy { value: u8, offset: usize },
    #[error("degenerate shape spec: {0}")]
    BadSpec(String),
    #[error("grid has no occupancy boundary ({0}); cannot supervise a fit")]
    UnusableSupervision(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Analytic shape descriptors for synthesizing test voxel grids.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeSpec {
    Cuboid {
        center: [f64; 3],
        half_extents: [f64; 3],
    },
    Cylinder {
        center: [f64; 3],
        radius: f64,
        half_height: f64,
        axis: Axis,
    },
    PlateWithHole {
        half_extents: [f64; 3],
        hole_radius: f64,
    },
    LBracket {
        first: CuboidPart,
        second: CuboidPart,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CuboidPart {
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl ShapeSpec {
    fn validate(&self) -> Result<(), VoxelError> {
        let pos = |v: f64| v > 0.0;
        let ok = match self {
            ShapeSpec::Cuboid { half_extents, .. } => half_extents.iter().all(|&v| pos(v)),
            ShapeSpec::Cylinder {
                radius,
                half_height,
                ..
            } => pos(*radius) && pos(*half_height),
            ShapeSpec::PlateWithHole {
                half_extents,
                hole_radius,
            } => half_extents.iter().all(|&v| pos(v)) && pos(*hole_radius),
            ShapeSpec::LBracket { first, second } => first
                .half_extents
                .iter()
                .chain(second.half_extents.iter())
                .all(|&v| pos(v)),
        };
        if ok {
            Ok(())
        } else {
            Err(VoxelError::BadSpec(format!("{self:?}")))
        }
    }

    /// Analytic inside test in world coordinates.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        fn in_cuboid(p: [f64; 3], c: &[f64; 3], he: &[f64; 3]) -> bool {
            (0..3).all(|a| (p[a] - c[a]).abs() <= he[a])
        }
        match self {
            ShapeSpec::Cuboid {
                center,
                half_extents,
            } => in_cuboid(p, center, half_extents),
            ShapeSpec::Cylinder {
                center,
                radius,
                half_height,
                axis,
            } => {
                let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
                let (h, u, v) = match axis {
                    Axis::X => (d[0], d[1], d[2]),
                    Axis::Y => (d[1], d[0], d[2]),
                    Axis::Z => (d[2], d[0], d[1]),
                };
                h.abs() <= *half_height && u * u + v * v <= radius * radius
            }
            ShapeSpec::PlateWithHole {
                half_extents,
                hole_radius,
            } => {
                in_cuboid(p, &[0.0; 3], half_extents)
                    && p[0] * p[0] + p[1] * p[1] >= hole_radius * hole_radius
            }
            ShapeSpec::LBracket { first, second } => {
                in_cuboid(p, &first.center, &first.half_extents)
                    || in_cuboid(p, &second.center, &second.half_extents)
            }
        }
    }
}

/// Immutable binary occupancy grid over [-0.5, 0.5]³.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoxelGrid {
    dim: usize,
    occ: Vec<u8>, // x-fastest, then y, then z
}

impl VoxelGrid {
    pub fn new(dim: usize, occ: Vec<u8>) -> Result<Self, VoxelError> {
        if !(2..=512).contains(&dim) {
            return Err(VoxelError::BadDim(dim as u32));
        }
        if occ.len() != dim * dim * dim {
            return Err(VoxelError::Truncated {
                need: dim * dim * dim,
                got: occ.len(),
                offset: 9,
            });
        }
        if let Some(pos) = occ.iter().position(|&b| b > 1) {
            return Err(VoxelError::BadOccupancy {
                value: occ[pos],
                offset: 9 + pos,
            });
        }
        Ok(Self { dim, occ })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> u8 {
        self.occ[(k * self.dim + j) * self.dim + i]
    }

    pub fn occupancy(&self) -> &[u8] {
        &self.occ
    }

    pub fn occupied_count(&self) -> usize {
        self.occ.iter().map(|&b| b as usize).sum()
    }

    pub fn is_mixed(&self) -> bool {
        let c = self.occupied_count();
        c > 0 && c < self.occ.len()
    }

    /// World coordinate of a voxel center.
    pub fn center<T: Real>(&self, i: usize, j: usize, k: usize) -> [T; 3] {
        let d = T::of(self.dim as f64);
        let half = T::of(0.5);
        let f = |v: usize| -half + (T::of(v as f64) + half) / d;
        let _ = k; // silence pattern; all three below
        [f(i), f(j), f(k)]
    }

    // ---- SECV serialization -------------------------------------------------

    pub fn to_secv_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + self.occ.len());
        out.extend_from_slice(SECV_MAGIC);
        out.push(SECV_VERSION);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&self.occ);
        out
    }

    pub fn from_secv_bytes(bytes: &[u8]) -> Result<Self, VoxelError> {
        if bytes.len() < 4 {
            return Err(VoxelError::Truncated {
                need: 4,
                got: bytes.len(),
                offset: 0,
            });
        }
        if &bytes[0..4] != SECV_MAGIC {
            return Err(VoxelError::BadMagic);
        }
        if bytes.len() < 5 {
            return Err(VoxelError::Truncated {
                need: 5,
                got: bytes.len(),
                offset: 4,
            });
        }
        if bytes[4] != SECV_VERSION {
            return Err(VoxelError::BadVersion(bytes[4]));
        }
        if bytes.len() < 9 {
            return Err(VoxelError::Truncated {
                need: 9,
                got: bytes.len(),
                offset: 5,
            });
        }
        let dim = u32::from_le_bytes(bytes[5..9].try_into().unwrap());
        if !(2..=512).contains(&dim) {
            return Err(VoxelError::BadDim(dim));
        }
        let n = (dim as usize).pow(3);
        if bytes.len() < 9 + n {
            return Err(VoxelError::Truncated {
                need: 9 + n,
                got: bytes.len(),
                offset: bytes.len(),
            });
        }
        Self::new(dim as usize, bytes[9..9 + n].to_vec())
    }

    pub fn save_secv(&self, path: &std::path::Path) -> Result<(), VoxelError> {
        std::fs::write(path, self.to_secv_bytes())?;
        Ok(())
    }

    pub fn load_secv(path: &std::path::Path) -> Result<Self, VoxelError> {
        Self::from_secv_bytes(&std::fs::read(path)?)
    }

    // ---- synthesis ----------------------------------------------------------

    /// Voxelize an analytic shape: a voxel is occupied iff its center passes
    /// the inside test.
    pub fn synthesize(spec: &ShapeSpec, dim: usize) -> Result<Self, VoxelError> {
        spec.validate()?;
        if !(2..=512).contains(&dim) {
            return Err(VoxelError::BadDim(dim as u32));
        }
        let mut occ = vec![0u8; dim * dim * dim];
        let centre = |v: usize| -0.5 + (v as f64 + 0.5) / dim as f64;
        let mut idx = 0;
        for k in 0..dim {
            for j in 0..dim {
                for i in 0..dim {
                    if spec.contains([centre(i), centre(j), centre(k)]) {
                        occ[idx] = 1;
                    }
                    idx += 1;
                }
            }
        }
        Self::new(dim, occ)
    }

    // ---- occupancy queries --------------------------------------------------

    /// Trilinear interpolation with voxel centers as sample sites; missing
    /// neighbors outside the grid blend with 0, so the field is continuous
    /// and vanishes beyond half a voxel outside the cube.
    pub fn occupancy_trilinear<T: Real>(&self, p: [T; 3]) -> T {
        let d = T::of(self.dim as f64);
        let half = T::of(0.5);
        let mut base = [0isize; 3];
        let mut frac = [T::zero(); 3];
        for a in 0..3 {
            let u = (p[a] + half) * d - half;
            let fl = u.floor();
            base[a] = fl.to_f64().map(|v| v as isize).unwrap_or(isize::MIN / 2);
            frac[a] = u - fl;
        }
        let fetch = |i: isize, j: isize, k: isize| -> T {
            let n = self.dim as isize;
            if i < 0 || j < 0 || k < 0 || i >= n || j >= n || k >= n {
                T::zero()
            } else {
                T::of(self.at(i as usize, j as usize, k as usize) as f64)
            }
        };
        let mut acc = T::zero();
        for dz in 0..2isize {
            for dy in 0..2isize {
                for dx in 0..2isize {
                    let wx = if dx == 0 { T::one() - frac[0] } else { frac[0] };
                    let wy = if dy == 0 { T::one() - frac[1] } else { frac[1] };
                    let wz = if dz == 0 { T::one() - frac[2] } else { frac[2] };
                    acc = acc + wx * wy * wz * fetch(base[0] + dx, base[1] + dy, base[2] + dz);
                }
            }
        }
        acc
    }

    /// Occupancy of the voxel containing `p` (nearest-center lookup);
    /// 0 outside the cube.
    pub fn occupancy_nearest<T: Real>(&self, p: [T; 3]) -> T {
        let d = self.dim as f64;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let u = ((p[a].to_f64().unwrap_or(f64::NAN) + 0.5) * d).floor();
            if !(0.0..d).contains(&u) {
                return T::zero();
            }
            idx[a] = u as usize;
        }
        T::of(self.at(idx[0], idx[1], idx[2]) as f64)
    }

    /// Convenience wrapper; see [`SamplePlan`] for the reusable form.
    pub fn sample_points<T: Real>(
        &self,
        n: usize,
        near_ratio: f64,
        seed: u64,
    ) -> Result<SampleBatch<T>, VoxelError> {
        Ok(SamplePlan::new(self)?.sample(self, n, near_ratio, seed))
    }
}

/// Occupancy-labeled training points.
#[derive(Debug, Clone)]
pub struct SampleBatch<T> {
    pub points: Vec<[T; 3]>,
    pub targets: Vec<T>,
}

impl<T> SampleBatch<T> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Precomputed near-boundary voxel list so per-epoch sampling is cheap.
pub struct SamplePlan {
    near_voxels: Vec<u32>,
}

impl SamplePlan {
    pub fn new(grid: &VoxelGrid) -> Result<Self, VoxelError> {
        let c = grid.occupied_count();
        if c == 0 {
            return Err(VoxelError::UnusableSupervision("all empty".into()));
        }
        if c == grid.occupancy().len() {
            return Err(VoxelError::UnusableSupervision("all occupied".into()));
        }
        let d = grid.dim() as isize;
        let mut near = Vec::new();
        for k in 0..d {
            for j in 0..d {
                for i in 0..d {
                    let v = grid.at(i as usize, j as usize, k as usize);
                    // within 2 cells (Chebyshev) of a differing voxel
                    'scan: for dk in -2..=2isize {
                        for dj in -2..=2isize {
                            for di in -2..=2isize {
                                let (x, y, z) = (i + di, j + dj, k + dk);
                                if x < 0 || y < 0 || z < 0 || x >= d || y >= d || z >= d {
                                    continue;
                                }
                                if grid.at(x as usize, y as usize, z as usize) != v {
                                    near.push(((k * d + j) * d + i) as u32);
                                    break 'scan;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(Self { near_voxels: near })
    }

    /// Draw `⌈near_ratio·n⌉` points jittered inside near-boundary voxels and
    /// the remainder uniformly over the cube. Point `j` consumes only stream
    /// `j` of the seed, so the batch is independent of evaluation order.
    pub fn sample<T: Real>(
        &self,
        grid: &VoxelGrid,
        n: usize,
        near_ratio: f64,
        seed: u64,
    ) -> SampleBatch<T> {
        assert!((0.0..=1.0).contains(&near_ratio), "near_ratio in [0,1]");
        let n_near = (near_ratio * n as f64).ceil().min(n as f64) as usize;
        let dim = grid.dim();
        let inv_dim = 1.0 / dim as f64;
        let mut points = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for j in 0..n {
            let mut r = rng::stream(seed, j as u64);
            let p: [f64; 3] = if j < n_near {
                let v = self.near_voxels[rng::index(&mut r, self.near_voxels.len())] as usize;
                let (i, rest) = (v % dim, v / dim);
                let (jy, kz) = (rest % dim, rest / dim);
                let cell = [i, jy, kz];
                let mut p = [0.0; 3];
                for (a, pa) in p.iter_mut().enumerate() {
                    *pa = -0.5 + (cell[a] as f64 + rng::unit::<f64>(&mut r)) * inv_dim;
                }
                p
            } else {
                [
                    rng::uniform(&mut r, -0.5, 0.5),
                    rng::uniform(&mut r, -0.5, 0.5),
                    rng::uniform(&mut r, -0.5, 0.5),
                ]
            };
            targets.push(grid.occupancy_nearest(p.map(T::of)));
            points.push(p.map(T::of));
        }
        SampleBatch { points, targets }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cuboid_grid(dim: usize, he: f64) -> VoxelGrid {
        VoxelGrid::synthesize(
            &ShapeSpec::Cuboid {
                center: [0.0; 3],
                half_extents: [he; 3],
            },
            dim,
        )
        .unwrap()
    }

    #[test]
    fn empty_file_loads_as_empty_grid() {
        let grid = VoxelGrid::new(64, vec![0; 64 * 64 * 64]).unwrap();
        let bytes = grid.to_secv_bytes();
        let back = VoxelGrid::from_secv_bytes(&bytes).unwrap();
        assert_eq!(back.occupied_count(), 0);
        assert_eq!(back.dim(), 64);
    }

    #[test]
    fn secv_round_trip_is_identity() {
        let mut occ = vec![0u8; 64];
        for (i, b) in occ.iter_mut().enumerate() {
            *b = ((i * 7 + 3) % 2) as u8;
        }
        let grid = VoxelGrid::new(4, occ.clone()).unwrap();
        let bytes = grid.to_secv_bytes();
        let back = VoxelGrid::from_secv_bytes(&bytes).unwrap();
        assert_eq!(back.occupancy(), &occ[..]);
        assert_eq!(back.to_secv_bytes(), bytes);
    }

    #[test]
    fn format_errors_name_offsets() {
        let e = VoxelGrid::from_secv_bytes(b"XXXX\x01\x04\x00\x00\x00").unwrap_err();
        assert!(e.to_string().contains("offset 0"), "{e}");
        let e = VoxelGrid::from_secv_bytes(b"SECV\x02\x04\x00\x00\x00").unwrap_err();
        assert!(e.to_string().contains("offset 4"), "{e}");
        let e = VoxelGrid::from_secv_bytes(b"SECV\x01\x00\x04\x00\x00").unwrap_err();
        assert!(e.to_string().contains("offset 5"), "{e}");
        let mut bytes = cuboid_grid(4, 0.3).to_secv_bytes();
        bytes.truncate(20);
        let e = VoxelGrid::from_secv_bytes(&bytes).unwrap_err();
        assert!(matches!(e, VoxelError::Truncated { need: 73, .. }), "{e}");
        let dim_too_big = 600u32;
        let mut bad = b"SECV\x01".to_vec();
        bad.extend_from_slice(&dim_too_big.to_le_bytes());
        assert!(matches!(
            VoxelGrid::from_secv_bytes(&bad).unwrap_err(),
            VoxelError::BadDim(600)
        ));
    }

    #[test]
    fn synthesize_matches_independent_scan() {
        let spec = ShapeSpec::Cuboid {
            center: [0.0; 3],
            half_extents: [0.25; 3],
        };
        let grid = VoxelGrid::synthesize(&spec, 64).unwrap();
        // independent brute-force count with its own inside test
        let mut count = 0usize;
        for k in 0..64 {
            for j in 0..64 {
                for i in 0..64 {
                    let c = |v: usize| -0.5 + (v as f64 + 0.5) / 64.0;
                    let (x, y, z) = (c(i), c(j), c(k));
                    if x.abs() <= 0.25 && y.abs() <= 0.25 && z.abs() <= 0.25 {
                        count += 1;
                    }
                }
            }
        }
        assert_eq!(grid.occupied_count(), count);
        assert!(count > 0);
    }

    #[test]
    fn synthesize_covering_cylinder_counts_inside_centers() {
        let spec = ShapeSpec::Cylinder {
            center: [0.0; 3],
            radius: 0.9,
            half_height: 0.6,
            axis: Axis::Z,
        };
        let grid = VoxelGrid::synthesize(&spec, 32).unwrap();
        let mut count = 0usize;
        for k in 0..32 {
            for j in 0..32 {
                for i in 0..32 {
                    let c = |v: usize| -0.5 + (v as f64 + 0.5) / 32.0;
                    let (x, y, _z) = (c(i), c(j), c(k));
                    if x * x + y * y <= 0.81 {
                        count += 1;
                    }
                }
            }
        }
        assert_eq!(grid.occupied_count(), count);
        assert_eq!(count, 32 * 32 * 32); // radius covers the whole cube
    }

    #[test]
    fn degenerate_spec_rejected() {
        let spec = ShapeSpec::Cuboid {
            center: [0.0; 3],
            half_extents: [0.0, 0.1, 0.1],
        };
        assert!(matches!(
            VoxelGrid::synthesize(&spec, 16),
            Err(VoxelError::BadSpec(_))
        ));
    }

    #[test]
    fn trilinear_identity_at_centers_and_midpoints() {
        let grid = cuboid_grid(16, 0.3);
        for (i, j, k) in [(3usize, 8usize, 8usize), (8, 8, 8), (12, 4, 9)] {
            let c: [f64; 3] = grid.center(i, j, k);
            let v = grid.occupancy_trilinear(c);
            assert!((v - grid.at(i, j, k) as f64).abs() < 1e-12);
        }
        // all-ones grid: deep interior point reads 1
        let ones = VoxelGrid::new(8, vec![1; 512]).unwrap();
        assert_eq!(ones.occupancy_trilinear([0.1f64, -0.2, 0.0]), 1.0);
        // midway between an occupied and an empty center along x
        let mut occ = vec![0u8; 8];
        occ[1] = 1; // (1,0,0) occupied, (0,0,0) empty at dim=2
        let g2 = VoxelGrid::new(2, occ).unwrap();
        let a: [f64; 3] = g2.center(0, 0, 0);
        let b: [f64; 3] = g2.center(1, 0, 0);
        let mid = [(a[0] + b[0]) / 2.0, a[1], a[2]];
        assert!((g2.occupancy_trilinear(mid) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_deterministic_and_labeled_correctly() {
        let grid = cuboid_grid(32, 0.25);
        let a: SampleBatch<f64> = grid.sample_points(8192, 0.5, 7).unwrap();
        let b: SampleBatch<f64> = grid.sample_points(8192, 0.5, 7).unwrap();
        assert_eq!(a.points, b.points);
        assert_eq!(a.targets, b.targets);
        for (p, t) in a.points.iter().zip(&a.targets) {
            assert_eq!(*t, grid.occupancy_nearest(*p));
            assert!(p.iter().all(|v| (-0.5..0.5).contains(v)));
        }
    }

    #[test]
    fn uniform_sampling_matches_occupied_fraction() {
        let grid = cuboid_grid(32, 0.25);
        let n = 20000;
        let batch: SampleBatch<f64> = grid.sample_points(n, 0.0, 11).unwrap();
        let frac_hit = batch.targets.iter().sum::<f64>() / n as f64;
        let p = grid.occupied_count() as f64 / (32.0 * 32.0 * 32.0);
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!(
            (frac_hit - p).abs() < 3.0 * sigma,
            "frac {frac_hit} vs p {p} (3σ = {})",
            3.0 * sigma
        );
    }

    #[test]
    fn unusable_grids_error() {
        let empty = VoxelGrid::new(8, vec![0; 512]).unwrap();
        assert!(matches!(
            empty.sample_points::<f64>(10, 0.5, 0),
            Err(VoxelError::UnusableSupervision(_))
        ));
        let full = VoxelGrid::new(8, vec![1; 512]).unwrap();
        assert!(matches!(
            full.sample_points::<f64>(10, 0.5, 0),
            Err(VoxelError::UnusableSupervision(_))
        ));
    }

    #[test]
    fn near_sampling_stays_near_boundary() {
        let grid = cuboid_grid(64, 0.25);
        let batch: SampleBatch<f64> = grid.sample_points(512, 1.0, 3).unwrap();
        // every point within 3 voxels of the analytic surface |max(|x|,|y|,|z|)| = 0.25
        for p in &batch.points {
            let linf = p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!((linf - 0.25).abs() < 3.5 / 64.0, "point {p:?}");
        }
    }
}
