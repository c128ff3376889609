//! The self-supervision objective: occupancy reconstruction loss, the 2D
//! sketch cross-section loss, and their weighted sum.

use crate::fieldops::FieldParams;
use crate::model::{CodeRef, SecadModel};
use crate::scalar::Real;
use crate::tape::{Ctx, Tape, TapeError, VarId};
use crate::voxel::{SampleBatch, VoxelGrid};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, bound = "")]
pub struct LossConfig<T: Real> {
    /// Weight of the sketch loss in the total objective.
    pub lambda: T,
    /// Multiplier on (l/2, w/2, h) for the box-membership test.
    pub margin: T,
    pub eta: T,
    pub phi: T,
}

impl<T: Real> Default for LossConfig<T> {
    fn default() -> Self {
        let fp = FieldParams::default();
        Self {
            lambda: T::of(0.01),
            margin: T::one(),
            eta: fp.eta,
            phi: fp.phi,
        }
    }
}

impl<T: Real> LossConfig<T> {
    pub fn field(&self) -> FieldParams<T> {
        FieldParams {
            eta: self.eta,
            phi: self.phi,
        }
    }
}

/// Mean squared error between predicted and target occupancy.
pub fn recon_loss<T: Real>(o_hat: &[T], o_star: &[T]) -> Result<T, TapeError> {
    if o_hat.len() != o_star.len() || o_hat.is_empty() {
        return Err(TapeError::Contract(format!(
            "recon_loss: lengths {} vs {}",
            o_hat.len(),
            o_star.len()
        )));
    }
    let mut acc = T::zero();
    for (a, b) in o_hat.iter().zip(o_star) {
        let d = *a - *b;
        acc = acc + d * d;
    }
    Ok(acc / T::of(o_hat.len() as f64))
}

/// Frozen per-head sketch supervision for one batch: member point indices
/// and the voxel cross-section occupancy at their in-plane projections.
pub struct SketchSupervision<T> {
    pub heads: Vec<(Arc<Vec<u32>>, Vec<T>)>,
}

/// Compute box membership (mask frozen, no gradient through the indicator)
/// and trilinear cross-section targets for every head. Uses the plain decode
/// path, which matches the tape transform bit for bit.
pub fn sketch_supervision<T: Real>(
    model: &SecadModel<T>,
    code: usize,
    grid: &VoxelGrid,
    batch: &SampleBatch<T>,
    cfg: &LossConfig<T>,
) -> SketchSupervision<T> {
    let boxes = model.decode_boxes(code);
    let mut heads = Vec::with_capacity(boxes.len());
    for b in &boxes {
        let half_l = b.length() / T::of(2.0) * cfg.margin;
        let half_w = b.width() / T::of(2.0) * cfg.margin;
        let half_h = b.half_height() * cfg.margin;
        let mut idx = Vec::new();
        let mut tgt = Vec::new();
        for (j, p) in batch.points.iter().enumerate() {
            let xt = b.to_local(*p);
            if xt[0].abs() <= half_l && xt[1].abs() <= half_w && xt[2].abs() <= half_h {
                idx.push(j as u32);
                let proj = b.to_world([xt[0], xt[1], T::zero()]);
                tgt.push(grid.occupancy_trilinear(proj));
            }
        }
        heads.push((Arc::new(idx), tgt));
    }
    SketchSupervision { heads }
}

/// Graph handles plus the part values captured at build time.
pub struct LossVars<T> {
    pub total: VarId,
    pub recon: T,
    pub sketch: T,
}

/// Build the full objective on the tape:
/// total = mean((O_hat − O*)²) + λ · Σᵢ mean over box-i members of
/// (σ(−η·s_sk) − O_cs)², with empty memberships contributing zero.
pub fn build_total_loss<T: Real>(
    ctx: &mut Ctx<'_, T>,
    model: &SecadModel<T>,
    code: &CodeRef<'_, T>,
    batch: &SampleBatch<T>,
    sup: &SketchSupervision<T>,
    cfg: &LossConfig<T>,
) -> Result<LossVars<T>, TapeError> {
    let fp = cfg.field();
    let vars = model.build_forward(ctx, code, &batch.points, &fp, None)?;
    let targets = ctx.constant(batch.len(), 1, &batch.targets)?;
    let diff = ctx.sub(vars.o_hat, targets)?;
    let recon = ctx.mean_sq(diff)?;
    let recon_val = ctx.value(recon)[0];

    let mut sketch: Option<VarId> = None;
    for (i, (idx, tgt)) in sup.heads.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let g = ctx.gather(vars.ssk[i], idx.clone())?;
        let pre = ctx.scale(g, -cfg.eta)?;
        let occ = ctx.sigmoid(pre)?;
        let t = ctx.constant(idx.len(), 1, tgt)?;
        let d = ctx.sub(occ, t)?;
        let li = ctx.mean_sq(d)?;
        sketch = Some(match sketch {
            Some(acc) => ctx.add(acc, li)?,
            None => li,
        });
    }
    let (total, sketch_val) = match sketch {
        Some(sk) => {
            let sketch_val = ctx.value(sk)[0];
            let weighted = ctx.scale(sk, cfg.lambda)?;
            (ctx.add(recon, weighted)?, sketch_val)
        }
        None => (recon, T::zero()),
    };
    Ok(LossVars {
        total,
        recon: recon_val,
        sketch: sketch_val,
    })
}

/// Loss parts of one evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossParts<T> {
    pub total: T,
    pub recon: T,
    pub sketch: T,
}

/// Forward-only evaluation of the total objective.
pub fn total_loss<T: Real>(
    model: &SecadModel<T>,
    code: usize,
    grid: &VoxelGrid,
    batch: &SampleBatch<T>,
    cfg: &LossConfig<T>,
) -> Result<LossParts<T>, TapeError> {
    let sup = sketch_supervision(model, code, grid, batch, cfg);
    let mut parts = LossParts {
        total: T::zero(),
        recon: T::zero(),
        sketch: T::zero(),
    };
    let mut tape = Tape::new();
    let (total, _) = tape.evaluate(&model.params, false, |ctx| {
        let v = build_total_loss(ctx, model, &CodeRef::Stored(code), batch, &sup, cfg)?;
        parts.recon = v.recon;
        parts.sketch = v.sketch;
        Ok(v.total)
    })?;
    parts.total = total;
    Ok(parts)
}

/// Forward-only sketch loss alone.
pub fn sketch_loss<T: Real>(
    model: &SecadModel<T>,
    code: usize,
    grid: &VoxelGrid,
    batch: &SampleBatch<T>,
    cfg: &LossConfig<T>,
) -> Result<T, TapeError> {
    Ok(total_loss(model, code, grid, batch, cfg)?.sketch)
}
