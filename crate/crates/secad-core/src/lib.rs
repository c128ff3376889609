//! secad-core — self-supervised sketch-extrude CAD reconstruction.
//!
//! Fits a small set of extruded 2D implicit sketches to a binary voxel
//! shape by gradient descent, then converts the fitted model into editable
//! CAD output: closed B-spline sketches, cylinder primitives, a CSG tree,
//! and triangle meshes, plus the reconstruction metrics used to judge them.
//!
//! The numeric core is generic over the scalar type (see [`scalar::Real`]);
//! the pipeline runs in `f64` via the aliases at the crate root.

pub mod extract;
pub mod fieldops;
pub mod losses;
pub mod mesh;
pub mod metrics;
pub mod model;
pub mod geom;
pub mod rng;
pub mod scalar;
pub mod trainer;
pub mod tape;
pub mod voxel;

pub use scalar::Real;

/// Scalar type used by the end-to-end pipeline. Fitting always runs in
/// 64-bit; 32-bit instantiations are available for export-side rasters.
pub type F = f64;

pub type SampleBatch = voxel::SampleBatch<F>;
pub type FieldParams = fieldops::FieldParams<F>;
pub type LossConfig = losses::LossConfig<F>;
pub type SecadModel = model::SecadModel<F>;
pub type ExtrusionBox = model::ExtrusionBox<F>;
