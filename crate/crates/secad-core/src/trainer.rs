//! Per-shape self-supervised fitting (auto-decoder), a shared-decoder
//! multi-shape mode for latent interpolation, and lossless checkpointing.
//!
//! One epoch = one full-batch Adam step on a freshly sampled point batch;
//! batches are keyed by (seed, epoch, shape), so a resumed run continues
//! exactly where an uninterrupted run would be.

use crate::losses::{self, LossConfig};
use crate::model::{ModelConfig, SecadModel};
use crate::rng;
use crate::scalar::Real;
use crate::tape::{AdamConfig, AdamState, Tape, TapeError};
use crate::voxel::{SamplePlan, VoxelError, VoxelGrid};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Voxel(#[from] VoxelError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("fit aborted at epoch {epoch}: {message}")]
    Aborted {
        epoch: usize,
        message: String,
        /// State as of the last completed step.
        last_good: Box<Checkpoint<f64>>,
    },
    #[error("checkpoint format version {found} unsupported (expected {CHECKPOINT_VERSION})")]
    CheckpointVersion { found: u32 },
    #[error("mode mismatch: {0}")]
    Mode(String),
    #[error("invalid checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, bound = "")]
pub struct FitConfig<T: Real> {
    pub epochs: usize,
    /// Points sampled per step (the batch is resampled every epoch).
    pub points: usize,
    /// Fraction of each batch drawn near the occupancy boundary.
    pub near_ratio: f64,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub loss: LossConfig<T>,
    pub model: ModelConfig,
    pub seed: u64,
}

impl<T: Real> Default for FitConfig<T> {
    fn default() -> Self {
        Self {
            epochs: 1000,
            points: 8192,
            near_ratio: 0.5,
            lr: T::of(1e-4),
            beta1: T::of(0.5),
            beta2: T::of(0.99),
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            seed: 0,
        }
    }
}

impl<T: Real> FitConfig<T> {
    pub fn adam(&self) -> AdamConfig<T> {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: T::of(1e-8),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    Single,
    Shared,
}

#[derive(Debug, Clone, Copy)]
pub struct EpochLoss<T> {
    pub epoch: usize,
    pub shape: usize,
    pub recon: T,
    pub sketch: T,
    pub total: T,
}

/// A complete training state: decoder + codes, optimizer moments, config,
/// progress, and the loss history. Round-trips through JSON bit-exactly.
#[derive(Debug)]
pub struct Checkpoint<T: Real> {
    pub mode: FitMode,
    pub cfg: FitConfig<T>,
    pub n_shapes: usize,
    /// Epochs completed so far.
    pub epoch: usize,
    pub model: SecadModel<T>,
    pub adam: AdamState<T>,
    pub history: Vec<EpochLoss<T>>,
}

impl<T: Real> Checkpoint<T> {
    pub fn final_losses(&self, shape: usize) -> Option<EpochLoss<T>> {
        self.history.iter().rev().find(|e| e.shape == shape).copied()
    }

    /// Loss-history CSV: `epoch,shape,recon,sketch,total`.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,shape,recon,sketch,total\n");
        for e in &self.history {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch,
                e.shape,
                e.recon.to_decimal(),
                e.sketch.to_decimal(),
                e.total.to_decimal()
            ));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        let layout = self.model.layout();
        let params: Vec<SegmentJson> = layout
            .segments()
            .iter()
            .enumerate()
            .map(|(i, s)| SegmentJson {
                name: s.name.clone(),
                rows: s.rows,
                cols: s.cols,
                values: self
                    .model
                    .params
                    .segment(crate::tape::SegId(i))
                    .iter()
                    .map(|v| v.to_decimal())
                    .collect(),
            })
            .collect();
        let doc = CheckpointJson {
            format_version: CHECKPOINT_VERSION,
            mode: self.mode,
            cfg: serde_json::to_value(self.cfg).expect("config serializes"),
            n_shapes: self.n_shapes,
            epoch: self.epoch,
            params,
            adam: AdamJson {
                t: self.adam.t,
                m: self.adam.m.iter().map(|v| v.to_decimal()).collect(),
                v: self.adam.v.iter().map(|v| v.to_decimal()).collect(),
            },
            history: self
                .history
                .iter()
                .map(|e| {
                    (
                        e.epoch,
                        e.shape,
                        e.recon.to_decimal(),
                        e.sketch.to_decimal(),
                        e.total.to_decimal(),
                    )
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let doc: CheckpointJson =
            serde_json::from_str(text).map_err(|e| TrainError::Malformed(e.to_string()))?;
        if doc.format_version != CHECKPOINT_VERSION {
            return Err(TrainError::CheckpointVersion {
                found: doc.format_version,
            });
        }
        let cfg: FitConfig<T> =
            serde_json::from_value(doc.cfg).map_err(|e| TrainError::Malformed(e.to_string()))?;
        let mut model = SecadModel::init(cfg.model, doc.n_shapes.max(1), cfg.seed);
        let layout = model.layout().clone();
        if layout.segments().len() != doc.params.len() {
            return Err(TrainError::Malformed(format!(
                "segment count {} does not match hyperparameters ({} expected)",
                doc.params.len(),
                layout.segments().len()
            )));
        }
        let parse = |s: &str| {
            T::from_decimal(s).ok_or_else(|| TrainError::Malformed(format!("bad scalar `{s}`")))
        };
        for (i, seg) in doc.params.iter().enumerate() {
            let expect = layout.seg(crate::tape::SegId(i));
            if seg.name != expect.name || seg.rows != expect.rows || seg.cols != expect.cols {
                return Err(TrainError::Malformed(format!(
                    "segment {} shape mismatch (got {}:{}x{})",
                    expect.name, seg.name, seg.rows, seg.cols
                )));
            }
            let dst = model.params.segment_mut(crate::tape::SegId(i));
            if seg.values.len() != dst.len() {
                return Err(TrainError::Malformed(format!(
                    "segment {} has {} values, expected {}",
                    seg.name,
                    seg.values.len(),
                    dst.len()
                )));
            }
            for (d, s) in dst.iter_mut().zip(&seg.values) {
                *d = parse(s)?;
            }
        }
        let mut adam = AdamState::new(cfg.adam(), layout.total());
        if doc.adam.m.len() != layout.total() || doc.adam.v.len() != layout.total() {
            return Err(TrainError::Malformed("Adam state length mismatch".into()));
        }
        adam.t = doc.adam.t;
        for (d, s) in adam.m.iter_mut().zip(&doc.adam.m) {
            *d = parse(s)?;
        }
        for (d, s) in adam.v.iter_mut().zip(&doc.adam.v) {
            *d = parse(s)?;
        }
        let mut history = Vec::with_capacity(doc.history.len());
        for (epoch, shape, r, s, t) in &doc.history {
            history.push(EpochLoss {
                epoch: *epoch,
                shape: *shape,
                recon: parse(r)?,
                sketch: parse(s)?,
                total: parse(t)?,
            });
        }
        Ok(Self {
            mode: doc.mode,
            cfg,
            n_shapes: doc.n_shapes,
            epoch: doc.epoch,
            model,
            adam,
            history,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SegmentJson {
    name: String,
    rows: usize,
    cols: usize,
    values: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct AdamJson {
    t: u64,
    m: Vec<String>,
    v: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointJson {
    format_version: u32,
    mode: FitMode,
    cfg: serde_json::Value,
    n_shapes: usize,
    epoch: usize,
    params: Vec<SegmentJson>,
    adam: AdamJson,
    history: Vec<(usize, usize, String, String, String)>,
}

/// Equivalent-area disk radius of the shape's mean cross-section within the
/// starter extrusion slab; the sketch heads start as disks of this size.
fn initial_disk_radius(grids: &[&VoxelGrid]) -> f64 {
    let mut acc = 0.0;
    for g in grids {
        let vol = g.occupied_count() as f64 / (g.dim() as f64).powi(3);
        let section = vol / 0.5; // starter slab height 2·h₀ = 0.5
        acc += (section / std::f64::consts::PI).sqrt();
    }
    (acc / grids.len() as f64).clamp(0.08, 0.3)
}

/// Fit one shape from scratch.
pub fn fit_single<T: Real>(grid: &VoxelGrid, cfg: FitConfig<T>) -> Result<Checkpoint<T>, TrainError>
where
    Checkpoint<f64>: From<Checkpoint<T>>,
{
    let plan = SamplePlan::new(grid)?;
    let model = SecadModel::init_with_disk(cfg.model, 1, cfg.seed, initial_disk_radius(&[grid]));
    let adam = AdamState::new(cfg.adam(), model.layout().total());
    let mut ckpt = Checkpoint {
        mode: FitMode::Single,
        cfg,
        n_shapes: 1,
        epoch: 0,
        model,
        adam,
        history: Vec::new(),
    };
    run_epochs(&mut ckpt, &[grid.clone()], &[plan], cfg.epochs)?;
    Ok(ckpt)
}

/// Fit several shapes with a shared decoder and one latent code per shape.
pub fn fit_shared<T: Real>(
    grids: &[VoxelGrid],
    cfg: FitConfig<T>,
) -> Result<Checkpoint<T>, TrainError>
where
    Checkpoint<f64>: From<Checkpoint<T>>,
{
    if grids.len() < 2 {
        return Err(TrainError::Mode(format!(
            "shared fit needs at least 2 shapes, got {}",
            grids.len()
        )));
    }
    let plans: Vec<SamplePlan> = grids
        .iter()
        .map(SamplePlan::new)
        .collect::<Result<_, _>>()?;
    let refs: Vec<&VoxelGrid> = grids.iter().collect();
    let model = SecadModel::init_with_disk(
        cfg.model,
        grids.len(),
        cfg.seed,
        initial_disk_radius(&refs),
    );
    let adam = AdamState::new(cfg.adam(), model.layout().total());
    let mut ckpt = Checkpoint {
        mode: FitMode::Shared,
        cfg,
        n_shapes: grids.len(),
        epoch: 0,
        model,
        adam,
        history: Vec::new(),
    };
    run_epochs(&mut ckpt, grids, &plans, cfg.epochs)?;
    Ok(ckpt)
}

/// Continue a loaded checkpoint up to `total_epochs`; byte-for-byte the same
/// as if the original run had never stopped.
pub fn fit_resume<T: Real>(
    ckpt: &mut Checkpoint<T>,
    grids: &[VoxelGrid],
    total_epochs: usize,
) -> Result<(), TrainError>
where
    Checkpoint<f64>: From<Checkpoint<T>>,
{
    if grids.len() != ckpt.n_shapes {
        return Err(TrainError::Mode(format!(
            "checkpoint has {} shapes, got {} grids",
            ckpt.n_shapes,
            grids.len()
        )));
    }
    let plans: Vec<SamplePlan> = grids
        .iter()
        .map(SamplePlan::new)
        .collect::<Result<_, _>>()?;
    run_epochs(ckpt, grids, &plans, total_epochs)
}

fn run_epochs<T: Real>(
    ckpt: &mut Checkpoint<T>,
    grids: &[VoxelGrid],
    plans: &[SamplePlan],
    total_epochs: usize,
) -> Result<(), TrainError>
where
    Checkpoint<f64>: From<Checkpoint<T>>,
{
    let cfg = ckpt.cfg;
    let mut tape = Tape::new();
    for epoch in ckpt.epoch..total_epochs {
        for (s, (grid, plan)) in grids.iter().zip(plans).enumerate() {
            let batch =
                plan.sample::<T>(grid, cfg.points, cfg.near_ratio, epoch_seed(cfg.seed, epoch, s));
            let sup = losses::sketch_supervision(&ckpt.model, s, grid, &batch, &cfg.loss);
            let mut parts = losses::LossParts {
                total: T::zero(),
                recon: T::zero(),
                sketch: T::zero(),
            };
            let model = &ckpt.model;
            let result = tape.evaluate(&model.params, true, |ctx| {
                let v = losses::build_total_loss(
                    ctx,
                    model,
                    &crate::model::CodeRef::Stored(s),
                    &batch,
                    &sup,
                    &cfg.loss,
                )?;
                parts.recon = v.recon;
                parts.sketch = v.sketch;
                Ok(v.total)
            });
            let (total, grads) = match result {
                Ok(ok) => ok,
                Err(e) => return Err(abort(ckpt, epoch, e.to_string())),
            };
            if !total.is_finite() {
                return Err(abort(ckpt, epoch, format!("loss became {total}")));
            }
            parts.total = total;
            ckpt.adam
                .step(&mut ckpt.model.params, &grads.expect("gradients requested"))?;
            ckpt.history.push(EpochLoss {
                epoch,
                shape: s,
                recon: parts.recon,
                sketch: parts.sketch,
                total: parts.total,
            });
        }
        ckpt.epoch = epoch + 1;
    }
    Ok(())
}

fn abort<T: Real>(ckpt: &Checkpoint<T>, epoch: usize, message: String) -> TrainError
where
    Checkpoint<f64>: From<Checkpoint<T>>,
{
    // Re-serialize the last good state through the lossless text form.
    let json = ckpt.to_json();
    let last_good = Checkpoint::<f64>::from_json(&json)
        .expect("checkpoint round-trips");
    TrainError::Aborted {
        epoch,
        message,
        last_good: Box::new(last_good),
    }
}

/// Batch seed for (run seed, epoch, shape).
pub fn epoch_seed(seed: u64, epoch: usize, shape: usize) -> u64 {
    rng::mix_seed(&[seed, epoch as u64, shape as u64])
}

/// Linear interpolation between two stored codes at `steps` evenly spaced
/// parameters in [0, 1] inclusive.
pub fn interpolate_codes<T: Real>(
    ckpt: &Checkpoint<T>,
    a: usize,
    b: usize,
    steps: usize,
) -> Result<Vec<Vec<T>>, TrainError> {
    if ckpt.mode != FitMode::Shared {
        return Err(TrainError::Mode(
            "latent interpolation needs a shared-mode checkpoint".into(),
        ));
    }
    if steps < 2 {
        return Err(TrainError::Mode("interpolation needs steps ≥ 2".into()));
    }
    if a >= ckpt.n_shapes || b >= ckpt.n_shapes {
        return Err(TrainError::Mode(format!(
            "shape index out of range (have {})",
            ckpt.n_shapes
        )));
    }
    let za = ckpt.model.code_values(a);
    let zb = ckpt.model.code_values(b);
    let mut out = Vec::with_capacity(steps);
    for k in 0..steps {
        let t = T::of(k as f64) / T::of((steps - 1) as f64);
        let one_m = T::one() - t;
        out.push(
            za.iter()
                .zip(zb)
                .map(|(x, y)| one_m * *x + t * *y)
                .collect(),
        );
    }
    Ok(out)
}

/// Volumetric intersection-over-union between the model occupancy
/// (thresholded at 0.5 on the voxel-center lattice) and the target grid.
pub fn volumetric_iou<T: Real>(
    model: &SecadModel<T>,
    code: usize,
    grid: &VoxelGrid,
    fp: &crate::fieldops::FieldParams<T>,
) -> Result<f64, TrainError> {
    let dim = grid.dim();
    let mut pts = Vec::with_capacity(dim * dim * dim);
    for k in 0..dim {
        for j in 0..dim {
            for i in 0..dim {
                pts.push(grid.center::<T>(i, j, k));
            }
        }
    }
    let out = model.forward_points(crate::model::CodeRef::Stored(code), &pts, fp)?;
    let half = T::of(0.5);
    let mut inter = 0usize;
    let mut union = 0usize;
    for (o, &g) in out.o_total.iter().zip(grid.occupancy()) {
        let p = *o >= half;
        let g = g == 1;
        if p && g {
            inter += 1;
        }
        if p || g {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::ShapeSpec;

    fn tiny_cfg(epochs: usize) -> FitConfig<f64> {
        FitConfig {
            epochs,
            points: 256,
            model: ModelConfig {
                heads: 2,
                hidden: 16,
                layers: 4,
                latent: 8,
            },
            seed: 9,
            ..FitConfig::default()
        }
    }

    fn cuboid_grid(dim: usize) -> VoxelGrid {
        VoxelGrid::synthesize(
            &ShapeSpec::Cuboid {
                center: [0.0; 3],
                half_extents: [0.25; 3],
            },
            dim,
        )
        .unwrap()
    }

    #[test]
    fn identical_seeds_give_identical_histories() {
        let grid = cuboid_grid(16);
        let a = fit_single(&grid, tiny_cfg(4)).unwrap();
        let b = fit_single(&grid, tiny_cfg(4)).unwrap();
        assert_eq!(a.history.len(), 4);
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!(x.total.to_bits(), y.total.to_bits());
            assert_eq!(x.recon.to_bits(), y.recon.to_bits());
        }
        assert_eq!(a.model.params.values(), b.model.params.values());
    }

    #[test]
    fn all_empty_grid_errors_before_any_step() {
        let empty = VoxelGrid::new(8, vec![0; 512]).unwrap();
        match fit_single(&empty, tiny_cfg(2)) {
            Err(TrainError::Voxel(VoxelError::UnusableSupervision(_))) => {}
            other => panic!("expected unusable-supervision error, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_resume_is_bitwise_identical() {
        let grid = cuboid_grid(16);
        let full = fit_single(&grid, tiny_cfg(5)).unwrap();

        let mut half = fit_single(&grid, tiny_cfg(3)).unwrap();
        // lossless round trip through the JSON document
        let json = half.to_json();
        let mut reloaded: Checkpoint<f64> = Checkpoint::from_json(&json).unwrap();
        assert_eq!(
            reloaded.model.params.values(),
            half.model.params.values(),
            "reload reproduces parameters bitwise"
        );
        fit_resume(&mut reloaded, &[grid.clone()], 5).unwrap();
        assert_eq!(full.history.len(), reloaded.history.len());
        for (x, y) in full.history.iter().zip(&reloaded.history) {
            assert_eq!(x.total.to_bits(), y.total.to_bits(), "epoch {}", x.epoch);
        }
        assert_eq!(full.model.params.values(), reloaded.model.params.values());
        assert_eq!(full.adam.m, reloaded.adam.m);
        assert_eq!(full.adam.t, reloaded.adam.t);
        let _ = &mut half;
    }

    #[test]
    fn checkpoint_version_mismatch_is_detected() {
        let grid = cuboid_grid(16);
        let ckpt = fit_single(&grid, tiny_cfg(1)).unwrap();
        let json = ckpt.to_json().replace("\"format_version\": 1", "\"format_version\": 9");
        match Checkpoint::<f64>::from_json(&json) {
            Err(TrainError::CheckpointVersion { found: 9 }) => {}
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn shared_fit_bookkeeping_and_self_consistency() {
        let grid = cuboid_grid(16);
        let grids = vec![grid.clone(), grid.clone()];
        let cfg = tiny_cfg(30);
        let ckpt = fit_shared(&grids, cfg).unwrap();
        assert_eq!(ckpt.history.len(), 30 * 2);
        assert_eq!(ckpt.model.n_codes(), 2);
        // two copies of the same shape: the two codes should describe nearly
        // the same field on a coarse probe
        let fp = cfg.loss.field();
        let mut pts = Vec::new();
        for k in 0..8 {
            for j in 0..8 {
                for i in 0..8 {
                    pts.push([
                        -0.5 + (i as f64 + 0.5) / 8.0,
                        -0.5 + (j as f64 + 0.5) / 8.0,
                        -0.5 + (k as f64 + 0.5) / 8.0,
                    ]);
                }
            }
        }
        let fa = ckpt
            .model
            .forward_points(crate::model::CodeRef::Stored(0), &pts, &fp)
            .unwrap();
        let fb = ckpt
            .model
            .forward_points(crate::model::CodeRef::Stored(1), &pts, &fp)
            .unwrap();
        let mad: f64 = fa
            .o_total
            .iter()
            .zip(&fb.o_total)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / pts.len() as f64;
        assert!(mad < 0.05, "mean absolute difference {mad}");
    }

    #[test]
    fn shared_fit_requires_two_shapes() {
        let grid = cuboid_grid(16);
        assert!(matches!(
            fit_shared(&[grid], tiny_cfg(1)),
            Err(TrainError::Mode(_))
        ));
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let grid = cuboid_grid(16);
        let grids = vec![grid.clone(), grid];
        let ckpt = fit_shared(&grids, tiny_cfg(2)).unwrap();
        let codes = interpolate_codes(&ckpt, 0, 1, 2).unwrap();
        assert_eq!(codes[0], ckpt.model.code_values(0));
        assert_eq!(codes[1], ckpt.model.code_values(1));
        let three = interpolate_codes(&ckpt, 0, 1, 3).unwrap();
        for (m, (a, b)) in three[1]
            .iter()
            .zip(ckpt.model.code_values(0).iter().zip(ckpt.model.code_values(1)))
        {
            assert!((m - 0.5 * (a + b)).abs() < 1e-15);
        }
        // a == b: equal up to one rounding of (1−t)·z + t·z
        let same = interpolate_codes(&ckpt, 0, 0, 4).unwrap();
        for c in &same {
            for (x, y) in c.iter().zip(ckpt.model.code_values(0)) {
                assert!((x - y).abs() <= f64::EPSILON * y.abs());
            }
        }
    }

    #[test]
    fn interpolation_rejects_single_mode_and_bad_steps() {
        let grid = cuboid_grid(16);
        let single = fit_single(&grid, tiny_cfg(1)).unwrap();
        assert!(matches!(
            interpolate_codes(&single, 0, 0, 2),
            Err(TrainError::Mode(_))
        ));
        let shared = fit_shared(&[grid.clone(), grid], tiny_cfg(1)).unwrap();
        assert!(matches!(
            interpolate_codes(&shared, 0, 1, 1),
            Err(TrainError::Mode(_))
        ));
    }

    #[test]
    fn batch_order_does_not_change_the_loss() {
        use crate::losses::total_loss;
        let grid = cuboid_grid(16);
        let cfg = tiny_cfg(1);
        let model: SecadModel<f64> = SecadModel::init(cfg.model, 1, cfg.seed);
        let batch: crate::voxel::SampleBatch<f64> = grid.sample_points(128, 0.5, 3).unwrap();
        let mut rev = crate::voxel::SampleBatch {
            points: batch.points.clone(),
            targets: batch.targets.clone(),
        };
        rev.points.reverse();
        rev.targets.reverse();
        let a = total_loss(&model, 0, &grid, &batch, &cfg.loss).unwrap();
        let b = total_loss(&model, 0, &grid, &rev, &cfg.loss).unwrap();
        assert!((a.total - b.total).abs() < 1e-12);
    }

    #[test]
    fn loss_trends_down_on_a_small_fixture() {
        let grid = cuboid_grid(24);
        let mut cfg = tiny_cfg(150);
        cfg.points = 1024;
        cfg.seed = 4;
        let ckpt = fit_single(&grid, cfg).unwrap();
        let early = ckpt.history[9].recon;
        let late = ckpt.history.last().unwrap().recon;
        assert!(
            late < early,
            "recon loss should fall: epoch 10 {early} vs final {late}"
        );
    }
}
