//! The sketch-extrude decoder: a latent code feeds a linear box head that
//! predicts per-cylinder extrusion boxes, and per-cylinder sketch networks
//! that map box-plane coordinates (conditioned on the code) to a 2D signed
//! distance clamped to [-1, 1]. The full forward pass composes the rigid
//! transform, sketch SDF, extrusion, occupancy conversion, and soft union.

use crate::fieldops::{self, FieldParams};
use crate::geom::{self, Quat, Vec3};
use crate::rng;
use crate::scalar::Real;
use crate::tape::{Ctx, Layout, ParameterStore, SegId, Tape, TapeError, VarId};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Positivity floor added to softplus-mapped box sizes.
pub const SIZE_FLOOR: f64 = 1e-3;
/// Centers are tanh-squashed then scaled by this, keeping them in the cube.
pub const CENTER_SCALE: f64 = 0.5;
/// Initial full sizes (l, w) of the decoded boxes.
const INIT_SIZE: f64 = 0.5;
/// Initial extrusion half-height.
const INIT_HALF_HEIGHT: f64 = 0.25;
/// Fallback radius of the approximate disk each sketch head represents at
/// init when no shape statistics are supplied.
pub const DEFAULT_DISK_RADIUS: f64 = 0.2;
/// Perturbation scales for the constructed head init.
const RIDGE_NOISE: f64 = 0.02;
const MIDDLE_NOISE: f64 = 0.002;
const READOUT_NOISE: f64 = 0.05;
/// Conditioning strength of the latent code on the first head layer.
const CODE_COND_STD: f64 = 0.02;
/// Middle layers start in the low-activation softplus tail. This bounds the
/// net's first-step movement under Adam (whose bias-corrected first update
/// moves every parameter by a full learning rate) to a small fraction of the
/// occupancy sigmoid's responsive band; with order-one activations the
/// 2·H² middle weights alone would drag the whole field through it.
const BOTTLENECK_BIAS: f64 = -4.0;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of extrusion cylinders (and sketch heads).
    pub heads: usize,
    /// Hidden width of each sketch head.
    pub hidden: usize,
    /// Total affine layers per sketch head.
    pub layers: usize,
    /// Latent code length.
    pub latent: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            hidden: 128,
            layers: 4,
            latent: 256,
        }
    }
}

/// Decoded pose and size of one extrusion box. `size = (l, w, h)` where l, w
/// span the sketch plane and h is the extrusion half-height; `quat` is unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtrusionBox<T> {
    pub size: [T; 3],
    pub center: Vec3<T>,
    pub quat: Quat<T>,
}

impl<T: Real> ExtrusionBox<T> {
    pub fn length(&self) -> T {
        self.size[0]
    }

    pub fn width(&self) -> T {
        self.size[1]
    }

    pub fn half_height(&self) -> T {
        self.size[2]
    }

    /// Sketch-plane axis: the box z-axis in world coordinates.
    pub fn axis(&self) -> Vec3<T> {
        geom::quat_rotate(self.quat, [T::zero(), T::zero(), T::one()])
    }

    /// World → box-local: `r⁻¹(x − c)`. The z component of the result is the
    /// signed height coordinate; x/y are sketch-plane coordinates.
    pub fn to_local(&self, x: Vec3<T>) -> Vec3<T> {
        geom::quat_rotate_inv(self.quat, geom::sub3(x, self.center))
    }

    /// Box-local → world: `r·x + c`.
    pub fn to_world(&self, x: Vec3<T>) -> Vec3<T> {
        geom::add3(geom::quat_rotate(self.quat, x), self.center)
    }
}

/// Rigid inverse transform into the box frame (the public single-point form
/// of the batched tape op).
pub fn transform_point<T: Real>(b: &ExtrusionBox<T>, x: Vec3<T>) -> Vec3<T> {
    b.to_local(x)
}

/// Segment handles for one sketch head.
#[derive(Debug, Clone)]
struct HeadSegs {
    w1xy: SegId,
    w1z: SegId,
    b1: SegId,
    /// Middle and last layers: (w, b) for layers 2..=layers.
    rest: Vec<(SegId, SegId)>,
}

/// The decoder plus its parameters: latent code(s), box head, sketch heads.
#[derive(Debug)]
pub struct SecadModel<T: Real> {
    cfg: ModelConfig,
    n_codes: usize,
    codes: Vec<SegId>,
    box_w: SegId,
    box_b: SegId,
    heads: Vec<HeadSegs>,
    pub params: ParameterStore<T>,
}

/// Graph handles produced by [`SecadModel::build_forward`].
pub struct ForwardVars {
    pub o_hat: VarId,
    /// Per-head clamped sketch SDF at the batch points (n×1 each).
    pub ssk: Vec<VarId>,
    /// Per-head cylinder SDF (n×1 each).
    pub scyl: Vec<VarId>,
    /// Per-head box-local coordinates (n×3 each).
    pub xt: Vec<VarId>,
}

/// Dense forward output.
pub struct ForwardField<T> {
    pub o_total: Vec<T>,
    /// Per-cylinder SDFs, `heads × n`.
    pub cyl_sdf: Vec<Vec<T>>,
}

/// Where the latent code for a forward pass comes from.
pub enum CodeRef<'a, T> {
    /// Trainable per-shape code segment.
    Stored(usize),
    /// Explicit values (e.g. an interpolated code); enters as a constant.
    Values(&'a [T]),
}

impl<T: Real> SecadModel<T> {
    /// Build the layout and initialize parameters deterministically.
    pub fn init(cfg: ModelConfig, n_codes: usize, seed: u64) -> Self {
        Self::init_with_disk(cfg, n_codes, seed, DEFAULT_DISK_RADIUS)
    }

    /// Initialize with the sketch heads representing disks of radius `r0`.
    /// Starting near the shape's own mean cross-section keeps the early
    /// full-batch Adam steps balanced instead of racing the whole field
    /// through the narrow live band of the sharp occupancy sigmoid.
    pub fn init_with_disk(cfg: ModelConfig, n_codes: usize, seed: u64, r0: f64) -> Self {
        assert!(cfg.heads >= 1, "need at least one cylinder");
        assert!(cfg.layers >= 2, "sketch head needs at least two layers");
        assert!(n_codes >= 1);
        let mut lb = Layout::builder();
        let codes: Vec<SegId> = (0..n_codes)
            .map(|c| lb.add(format!("z{c}"), 1, cfg.latent))
            .collect();
        let box_w = lb.add("box.w", 10 * cfg.heads, cfg.latent);
        let box_b = lb.add("box.b", 1, 10 * cfg.heads);
        let mut heads = Vec::with_capacity(cfg.heads);
        for i in 0..cfg.heads {
            let w1xy = lb.add(format!("head{i}.w1xy"), cfg.hidden, 2);
            let w1z = lb.add(format!("head{i}.w1z"), cfg.hidden, cfg.latent);
            let b1 = lb.add(format!("head{i}.b1"), 1, cfg.hidden);
            let mut rest = Vec::new();
            for l in 2..=cfg.layers {
                let out = if l == cfg.layers { 1 } else { cfg.hidden };
                let w = lb.add(format!("head{i}.w{l}"), out, cfg.hidden);
                let b = lb.add(format!("head{i}.b{l}"), 1, out);
                rest.push((w, b));
            }
            heads.push(HeadSegs { w1xy, w1z, b1, rest });
        }
        let layout = lb.build();
        let mut params = ParameterStore::zeros(layout);
        let mut model = Self {
            cfg,
            n_codes,
            codes,
            box_w,
            box_b,
            heads,
            params,
        };
        model.initialize(seed, r0);
        params = model.params;
        model.params = params;
        model
    }

    fn initialize(&mut self, seed: u64, r0: f64) {
        let base = rng::mix_seed(&[seed, 0x5ec4d]);
        let cfg = self.cfg;
        // codes: small gaussian
        for (c, &seg) in self.codes.clone().iter().enumerate() {
            let mut r = rng::stream(base, rng::mix_seed(&[1, c as u64]));
            for v in self.params.segment_mut(seg) {
                *v = T::of(0.01) * rng::normal(&mut r);
            }
        }
        // box head: small uniform weights, bias decoding to axis-aligned
        // starter boxes (sizes 0.5, h 0.25, centers 0, identity rotation)
        {
            let mut r = rng::stream(base, rng::mix_seed(&[2, 0]));
            for v in self.params.segment_mut(self.box_w) {
                *v = rng::uniform(&mut r, T::of(-0.01), T::of(0.01));
            }
            let inv_softplus = |y: f64| (y.exp() - 1.0).ln();
            let sz = inv_softplus(INIT_SIZE - SIZE_FLOOR);
            let hh = inv_softplus(INIT_HALF_HEIGHT - SIZE_FLOOR);
            let bias = self.params.segment_mut(self.box_b);
            for i in 0..cfg.heads {
                let b = &mut bias[10 * i..10 * (i + 1)];
                b[0] = T::of(sz);
                b[1] = T::of(sz);
                b[2] = T::of(hh);
                // centers stay 0 (tanh(0) = 0); identity quaternion
                b[6] = T::one();
            }
        }
        // Sketch heads start as approximate centered disks, s ≈ ‖p‖ − r0:
        // unit-direction ridges in the first layer, near-identity middle
        // layers, and a calibrated mean readout. The sharp occupancy sigmoid
        // then has a live gradient ring at the disk boundary from step one,
        // which training deforms toward the target profile; a generic random
        // init leaves every point in a saturated zero-gradient zone.
        let heads = self.heads.clone();
        let h = cfg.hidden;
        for (i, hs) in heads.iter().enumerate() {
            let mut r = rng::stream(base, rng::mix_seed(&[3, i as u64]));
            // golden-angle offset decorrelates the heads' ridge directions
            let theta0 = 2.399963229728653 * i as f64;
            {
                let w1 = self.params.segment_mut(hs.w1xy);
                for k in 0..h {
                    let th = theta0 + std::f64::consts::TAU * k as f64 / h as f64;
                    w1[2 * k] = T::of(th.cos()) + T::of(RIDGE_NOISE) * rng::normal(&mut r);
                    w1[2 * k + 1] = T::of(th.sin()) + T::of(RIDGE_NOISE) * rng::normal(&mut r);
                }
            }
            for v in self.params.segment_mut(hs.w1z) {
                *v = T::of(CODE_COND_STD) * rng::normal(&mut r);
            }
            // middle layers: identity routing into the softplus tail
            let last = hs.rest.len() - 1;
            for (k, (w, b)) in hs.rest.iter().enumerate() {
                if k == last {
                    continue;
                }
                let wseg = self.params.segment_mut(*w);
                for (e, v) in wseg.iter_mut().enumerate() {
                    let (row, col) = (e / h, e % h);
                    let eye = if row == col { T::one() } else { T::zero() };
                    *v = eye + T::of(MIDDLE_NOISE) * rng::normal(&mut r);
                }
                self.params
                    .segment_mut(*b)
                    .fill(T::of(BOTTLENECK_BIAS));
            }
            // readout: mean of the ridge features is a radial function G(ρ);
            // calibrate scale and bias so s(ρ) ≈ ρ − r0 near the disk edge
            let (rho1, rho2) = (r0 - 0.05, r0 + 0.05);
            let phi1 = self.mean_feature(i, rho1);
            let phi2 = self.mean_feature(i, rho2);
            let gamma = (rho2 - rho1) / (phi2 - phi1).to_f64().unwrap_or(1.0).max(1e-9);
            let phi0 = 0.5 * (phi1 + phi2).to_f64().unwrap_or(0.0);
            let (wlast, blast) = hs.rest[last];
            {
                let wseg = self.params.segment_mut(wlast);
                for v in wseg.iter_mut() {
                    *v = T::of(gamma / h as f64)
                        * (T::one() + T::of(READOUT_NOISE) * rng::normal(&mut r));
                }
            }
            self.params.segment_mut(blast)[0] = T::of(-gamma * phi0);
        }
    }

    /// Mean hidden feature of head `i` (layers 1..last, z = 0) averaged over
    /// a ring of radius rho. Used once to calibrate the initial readout.
    fn mean_feature(&self, i: usize, rho: f64) -> T {
        let hs = &self.heads[i];
        let h = self.cfg.hidden;
        let w1 = self.params.segment(hs.w1xy);
        let b1 = self.params.segment(hs.b1);
        let mut acc = T::zero();
        let n_angles = 64;
        for a in 0..n_angles {
            let th = std::f64::consts::TAU * a as f64 / n_angles as f64;
            let p = [T::of(rho * th.cos()), T::of(rho * th.sin())];
            let mut act: Vec<T> = (0..h)
                .map(|k| {
                    fieldops::softplus(w1[2 * k] * p[0] + w1[2 * k + 1] * p[1] + b1[k])
                })
                .collect();
            for (l, (w, b)) in hs.rest.iter().enumerate() {
                if l == hs.rest.len() - 1 {
                    break;
                }
                let wseg = self.params.segment(*w);
                let bseg = self.params.segment(*b);
                act = (0..h)
                    .map(|row| {
                        let mut s = bseg[row];
                        for col in 0..h {
                            s = s + wseg[row * h + col] * act[col];
                        }
                        fieldops::softplus(s)
                    })
                    .collect();
            }
            let mean = act.iter().fold(T::zero(), |s, v| s + *v) / T::of(h as f64);
            acc = acc + mean;
        }
        acc / T::of(n_angles as f64)
    }

    pub fn config(&self) -> ModelConfig {
        self.cfg
    }

    pub fn n_codes(&self) -> usize {
        self.n_codes
    }

    pub fn layout(&self) -> &Arc<Layout> {
        self.params.layout()
    }

    pub fn code_segment(&self, code: usize) -> SegId {
        self.codes[code]
    }

    pub fn code_values(&self, code: usize) -> &[T] {
        self.params.segment(self.codes[code])
    }

    pub fn set_code_values(&mut self, code: usize, values: &[T]) {
        self.params
            .segment_mut(self.codes[code])
            .copy_from_slice(values);
    }

    // ---- plain decode (bit-identical to the tape decode) --------------------

    /// Decode all extrusion boxes from the stored code `code`.
    pub fn decode_boxes(&self, code: usize) -> Vec<ExtrusionBox<T>> {
        self.decode_boxes_from(self.code_values(code))
    }

    /// Decode from explicit code values.
    pub fn decode_boxes_from(&self, z: &[T]) -> Vec<ExtrusionBox<T>> {
        let n_out = 10 * self.cfg.heads;
        let k = self.cfg.latent;
        assert_eq!(z.len(), k);
        let w = self.params.segment(self.box_w);
        let b = self.params.segment(self.box_b);
        let mut raw = b.to_vec();
        T::gemm(
            1,
            k,
            n_out,
            T::one(),
            z,
            k as isize,
            1,
            w,
            1,
            k as isize,
            &mut raw,
            n_out as isize,
            1,
        );
        (0..self.cfg.heads)
            .map(|i| decode_one_box(&raw[10 * i..10 * (i + 1)]))
            .collect()
    }

    // ---- tape graph builders -------------------------------------------------

    fn z_node(&self, ctx: &mut Ctx<'_, T>, code: &CodeRef<'_, T>) -> Result<VarId, TapeError> {
        match code {
            CodeRef::Stored(c) => ctx.param(self.codes[*c]),
            CodeRef::Values(v) => {
                assert_eq!(v.len(), self.cfg.latent);
                ctx.constant(1, self.cfg.latent, v)
            }
        }
    }

    /// Sketch SDF subgraph of head `i` on 2D points `xy` (n×2) → n×1.
    pub fn build_head_sdf(
        &self,
        ctx: &mut Ctx<'_, T>,
        i: usize,
        xy: VarId,
        z: VarId,
    ) -> Result<VarId, TapeError> {
        let hs = &self.heads[i];
        let w1xy = ctx.param(hs.w1xy)?;
        let w1z = ctx.param(hs.w1z)?;
        let b1 = ctx.param(hs.b1)?;
        // first layer split: x·W_xyᵀ + (z·W_zᵀ + b), the z part shared by rows
        let zpart = ctx.affine(z, w1z, Some(b1))?;
        let xypart = ctx.affine(xy, w1xy, None)?;
        let a1 = ctx.add_row(xypart, zpart)?;
        let mut h = ctx.softplus(a1)?;
        let last = hs.rest.len() - 1;
        for (k, (w, b)) in hs.rest.iter().enumerate() {
            let w = ctx.param(*w)?;
            let b = ctx.param(*b)?;
            let a = ctx.affine(h, w, Some(b))?;
            h = if k == last { a } else { ctx.softplus(a)? };
        }
        ctx.clamp(h, -T::one(), T::one())
    }

    /// Full forward graph: points (n×3 constant) → per-cylinder SDFs and the
    /// soft-union occupancy. When `boxes` is given, box poses enter as
    /// constants instead of being decoded from the code (used to test rigid
    /// invariance and to render frozen poses).
    pub fn build_forward(
        &self,
        ctx: &mut Ctx<'_, T>,
        code: &CodeRef<'_, T>,
        points: &[[T; 3]],
        fp: &FieldParams<T>,
        boxes: Option<&[ExtrusionBox<T>]>,
    ) -> Result<ForwardVars, TapeError> {
        let n = points.len();
        let flat: Vec<T> = points.iter().flat_map(|p| p.iter().copied()).collect();
        let pts = ctx.constant(n, 3, &flat)?;
        let z = self.z_node(ctx, code)?;
        let braw = match boxes {
            Some(_) => None,
            None => {
                let w = ctx.param(self.box_w)?;
                let b = ctx.param(self.box_b)?;
                Some(ctx.affine(z, w, Some(b))?)
            }
        };
        let mut ssk_all = Vec::with_capacity(self.cfg.heads);
        let mut scyl_all = Vec::with_capacity(self.cfg.heads);
        let mut xt_all = Vec::with_capacity(self.cfg.heads);
        let mut occs = Vec::with_capacity(self.cfg.heads);
        for i in 0..self.cfg.heads {
            let (q, c, h) = match (braw, boxes) {
                (Some(braw), _) => {
                    let sraw = ctx.cols(braw, 10 * i, 3)?;
                    let sp = ctx.softplus(sraw)?;
                    let sizes = ctx.offset(sp, T::of(SIZE_FLOOR))?;
                    let h = ctx.cols(sizes, 2, 1)?;
                    let craw = ctx.cols(braw, 10 * i + 3, 3)?;
                    let ct = ctx.tanh(craw)?;
                    let c = ctx.scale(ct, T::of(CENTER_SCALE))?;
                    let q = ctx.cols(braw, 10 * i + 6, 4)?;
                    (q, c, h)
                }
                (None, Some(bx)) => {
                    let b = &bx[i];
                    let q = ctx.constant(1, 4, &b.quat)?;
                    let c = ctx.constant(1, 3, &b.center)?;
                    let h = ctx.constant(1, 1, &[b.size[2]])?;
                    (q, c, h)
                }
                (None, None) => unreachable!(),
            };
            let xt = ctx.inv_transform(q, c, pts)?;
            let xy = ctx.cols(xt, 0, 2)?;
            let ssk = self.build_head_sdf(ctx, i, xy, z)?;
            let zt = ctx.cols(xt, 2, 1)?;
            let za = ctx.abs(zt)?;
            let negh = ctx.scale(h, -T::one())?;
            let d = ctx.add_row(za, negh)?;
            // extrusion SDF assembled from the same primitive steps as the
            // closed-form kernel: min(max(s,d),0) + ‖(max(s,0), max(d,0))‖
            let m1 = ctx.max(ssk, d)?;
            let m2 = ctx.min_const(m1, T::zero())?;
            let sp = ctx.max_const(ssk, T::zero())?;
            let dp = ctx.max_const(d, T::zero())?;
            let r = ctx.hypot(sp, dp)?;
            let scyl = ctx.add(m2, r)?;
            let pre = ctx.scale(scyl, -fp.eta)?;
            let occ = ctx.sigmoid(pre)?;
            ssk_all.push(ssk);
            scyl_all.push(scyl);
            xt_all.push(xt);
            occs.push(occ);
        }
        let occmat = ctx.concat_cols(&occs)?;
        let o_hat = ctx.soft_union(occmat, fp.phi)?;
        Ok(ForwardVars {
            o_hat,
            ssk: ssk_all,
            scyl: scyl_all,
            xt: xt_all,
        })
    }

    // ---- dense evaluation ------------------------------------------------------

    /// Evaluate O_total and per-cylinder SDFs at arbitrary points (chunked,
    /// forward only).
    pub fn forward_points(
        &self,
        code: CodeRef<'_, T>,
        points: &[[T; 3]],
        fp: &FieldParams<T>,
    ) -> Result<ForwardField<T>, TapeError> {
        self.forward_points_impl(code, points, fp, None)
    }

    /// Same, with explicit box poses injected after decode.
    pub fn forward_points_boxes(
        &self,
        code: CodeRef<'_, T>,
        boxes: &[ExtrusionBox<T>],
        points: &[[T; 3]],
        fp: &FieldParams<T>,
    ) -> Result<ForwardField<T>, TapeError> {
        self.forward_points_impl(code, points, fp, Some(boxes))
    }

    fn forward_points_impl(
        &self,
        code: CodeRef<'_, T>,
        points: &[[T; 3]],
        fp: &FieldParams<T>,
        boxes: Option<&[ExtrusionBox<T>]>,
    ) -> Result<ForwardField<T>, TapeError> {
        const CHUNK_PTS: usize = 4096;
        let mut o_total = Vec::with_capacity(points.len());
        let mut cyl_sdf = vec![Vec::with_capacity(points.len()); self.cfg.heads];
        let mut tape = Tape::new();
        for chunk in points.chunks(CHUNK_PTS.max(1)) {
            let o_ref = &mut o_total;
            let s_ref = &mut cyl_sdf;
            tape.evaluate(&self.params, false, |ctx| {
                let vars = self.build_forward(ctx, &code, chunk, fp, boxes)?;
                o_ref.extend_from_slice(ctx.value(vars.o_hat));
                for (dst, &src) in s_ref.iter_mut().zip(&vars.scyl) {
                    dst.extend_from_slice(ctx.value(src));
                }
                // evaluate() needs a scalar root; the union mean serves
                ctx.mean_sq(vars.o_hat)
            })?;
        }
        Ok(ForwardField { o_total, cyl_sdf })
    }

    /// Sketch SDF of head `i` at one plane point (negative inside).
    pub fn sketch_sdf(&self, i: usize, p: [T; 2], code: CodeRef<'_, T>) -> Result<T, TapeError> {
        let mut out = T::zero();
        let mut tape = Tape::new();
        tape.evaluate(&self.params, false, |ctx| {
            let xy = ctx.constant(1, 2, &p)?;
            let z = self.z_node(ctx, &code)?;
            let s = self.build_head_sdf(ctx, i, xy, z)?;
            out = ctx.value(s)[0];
            ctx.mean_sq(s)
        })?;
        Ok(out)
    }

    /// Rasterize head `i`'s sketch SDF at the given plane coordinates.
    pub fn sketch_sdf_batch(
        &self,
        i: usize,
        pts: &[[T; 2]],
        code: CodeRef<'_, T>,
    ) -> Result<Vec<T>, TapeError> {
        const CHUNK_PTS: usize = 8192;
        let mut out = Vec::with_capacity(pts.len());
        let mut tape = Tape::new();
        for chunk in pts.chunks(CHUNK_PTS) {
            let flat: Vec<T> = chunk.iter().flat_map(|p| p.iter().copied()).collect();
            let out_ref = &mut out;
            tape.evaluate(&self.params, false, |ctx| {
                let xy = ctx.constant(chunk.len(), 2, &flat)?;
                let z = self.z_node(ctx, &code)?;
                let s = self.build_head_sdf(ctx, i, xy, z)?;
                out_ref.extend_from_slice(ctx.value(s));
                ctx.mean_sq(s)
            })?;
        }
        Ok(out)
    }
}

/// Map ten raw box-head outputs to a valid extrusion box. Kept identical to
/// the tape decode: softplus + floor on sizes, tanh·0.5 on centers,
/// normalized quaternion.
pub fn decode_one_box<T: Real>(raw: &[T]) -> ExtrusionBox<T> {
    let floor = T::of(SIZE_FLOOR);
    let half = T::of(CENTER_SCALE);
    ExtrusionBox {
        size: [
            fieldops::softplus(raw[0]) + floor,
            fieldops::softplus(raw[1]) + floor,
            fieldops::softplus(raw[2]) + floor,
        ],
        center: [
            raw[3].tanh() * half,
            raw[4].tanh() * half,
            raw[5].tanh() * half,
        ],
        quat: geom::quat_normalize([raw[6], raw[7], raw[8], raw[9]]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fieldops::occupancy_from_sdf;
    use crate::tape::finite_diff_check;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            heads: 2,
            hidden: 16,
            layers: 4,
            latent: 8,
        }
    }

    #[test]
    fn decode_normalizes_quaternion_and_floors_sizes() {
        let b = decode_one_box(&[0.0f64, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0]);
        assert_eq!(b.quat, [1.0, 0.0, 0.0, 0.0]);
        let expect = (2.0f64).ln() + 1e-3;
        for s in b.size {
            assert!((s - expect).abs() < 1e-12, "{s} vs {expect}");
        }
        assert_eq!(b.center, [0.0, 0.0, 0.0]);
        let norm: f64 = b.quat.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_box_weights_give_identical_boxes() {
        let mut m: SecadModel<f64> = SecadModel::init(small_cfg(), 1, 3);
        let wseg = m.layout().by_name("box.w").unwrap();
        m.params.segment_mut(wseg).fill(0.0);
        let boxes = m.decode_boxes(0);
        assert_eq!(boxes.len(), 2);
        assert_eq!(boxes[0], boxes[1]);
    }

    #[test]
    fn transform_point_identity_and_rotation() {
        let ident = ExtrusionBox {
            size: [0.5f64, 0.5, 0.25],
            center: [0.0; 3],
            quat: [1.0, 0.0, 0.0, 0.0],
        };
        let x = [0.2, -0.1, 0.4];
        assert_eq!(transform_point(&ident, x), x);

        let s = (0.5f64).sqrt();
        let rot = ExtrusionBox {
            quat: [s, 0.0, 0.0, s], // +90° about z
            ..ident
        };
        let u = transform_point(&rot, [1.0, 0.0, 0.0]);
        assert!(u[0].abs() < 1e-15 && (u[1] + 1.0).abs() < 1e-15 && u[2].abs() < 1e-15);
    }

    #[test]
    fn transform_round_trip_recovers_point() {
        let b = ExtrusionBox {
            size: [0.4f64, 0.3, 0.2],
            center: [0.1, -0.2, 0.05],
            quat: geom::quat_normalize([0.8, 0.1, -0.4, 0.3]),
        };
        for x in [[0.3, 0.2, -0.4], [-0.5, 0.5, 0.0], [0.01, -0.02, 0.03]] {
            let back = b.to_world(b.to_local(x));
            for a in 0..3 {
                assert!((back[a] - x[a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quaternion_sign_symmetry() {
        let q = geom::quat_normalize([0.6f64, -0.2, 0.7, 0.1]);
        let b1 = ExtrusionBox {
            size: [0.5, 0.5, 0.25],
            center: [0.1, 0.0, -0.1],
            quat: q,
        };
        let b2 = ExtrusionBox {
            quat: [-q[0], -q[1], -q[2], -q[3]],
            ..b1
        };
        let x = [0.3, -0.3, 0.2];
        let (u1, u2) = (transform_point(&b1, x), transform_point(&b2, x));
        for a in 0..3 {
            assert!((u1[a] - u2[a]).abs() < 1e-14);
        }
    }

    #[test]
    fn sketch_sdf_zero_weights_yields_clamped_bias() {
        let mut m: SecadModel<f64> = SecadModel::init(small_cfg(), 1, 9);
        // zero every head-0 segment, then set the last bias to 0.7
        for name in ["head0.w1xy", "head0.w1z", "head0.b1", "head0.w2", "head0.b2", "head0.w3", "head0.b3", "head0.w4"] {
            let seg = m.layout().by_name(name).unwrap();
            m.params.segment_mut(seg).fill(0.0);
        }
        let b4 = m.layout().by_name("head0.b4").unwrap();
        m.params.segment_mut(b4)[0] = 0.7;
        let s = m.sketch_sdf(0, [0.3, -0.2], CodeRef::Stored(0)).unwrap();
        assert_eq!(s, 0.7);
        // and with a bias outside the clamp range
        m.params.segment_mut(b4)[0] = -3.0;
        let s = m.sketch_sdf(0, [0.0, 0.0], CodeRef::Stored(0)).unwrap();
        assert_eq!(s, -1.0);
    }

    #[test]
    fn sketch_sdf_stays_in_clamp_range() {
        let m: SecadModel<f64> = SecadModel::init(small_cfg(), 1, 11);
        let mut r = rng::stream(4, 0);
        for _ in 0..50 {
            let p = [rng::uniform(&mut r, -2.0, 2.0), rng::uniform(&mut r, -2.0, 2.0)];
            let s = m.sketch_sdf(0, p, CodeRef::Stored(0)).unwrap();
            assert!((-1.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn single_head_union_is_identity() {
        let cfg = ModelConfig {
            heads: 1,
            ..small_cfg()
        };
        let m: SecadModel<f64> = SecadModel::init(cfg, 1, 5);
        let pts: Vec<[f64; 3]> = vec![[0.0, 0.0, 0.0], [0.2, 0.1, -0.3], [0.45, -0.45, 0.45]];
        let fp = FieldParams::default();
        let out = m.forward_points(CodeRef::Stored(0), &pts, &fp).unwrap();
        for (o, s) in out.o_total.iter().zip(&out.cyl_sdf[0]) {
            let direct = occupancy_from_sdf(*s, fp.eta);
            assert_eq!(*o, direct, "single-cylinder union must be exact");
        }
    }

    #[test]
    fn deep_inside_point_is_fully_occupied() {
        // crafted head: zero weights, last bias -0.5 → s_sk = -0.5 everywhere;
        // box h = 0.25 at the origin → the origin is deep inside
        let cfg = ModelConfig {
            heads: 1,
            ..small_cfg()
        };
        let mut m: SecadModel<f64> = SecadModel::init(cfg, 1, 5);
        for name in ["head0.w1xy", "head0.w1z", "head0.b1", "head0.w2", "head0.b2", "head0.w3", "head0.b3", "head0.w4"] {
            let seg = m.layout().by_name(name).unwrap();
            m.params.segment_mut(seg).fill(0.0);
        }
        let b4 = m.layout().by_name("head0.b4").unwrap();
        m.params.segment_mut(b4)[0] = -0.5;
        let wseg = m.layout().by_name("box.w").unwrap();
        m.params.segment_mut(wseg).fill(0.0);
        let fp = FieldParams::default();
        let out = m
            .forward_points(CodeRef::Stored(0), &[[0.0, 0.0, 0.0]], &fp)
            .unwrap();
        // s_cyl = max(-0.5, |0|-0.25) = -0.25 ≤ -0.1 → occupancy ≥ σ(150·0.1)
        let bound = fieldops::sigmoid(15.0);
        assert!(out.o_total[0] >= bound, "{} < {bound}", out.o_total[0]);
    }

    #[test]
    fn rigid_invariance_under_pose_injection() {
        let m: SecadModel<f64> = SecadModel::init(small_cfg(), 1, 21);
        let fp = FieldParams::default();
        let boxes = m.decode_boxes(0);
        let pts: Vec<[f64; 3]> = vec![[0.1, 0.2, 0.3], [-0.2, 0.0, 0.1], [0.3, -0.3, -0.2]];
        let base = m
            .forward_points_boxes(CodeRef::Stored(0), &boxes, &pts, &fp)
            .unwrap();

        // rigid motion M: rotation + translation
        let mq = geom::quat_normalize([0.9, 0.25, -0.1, 0.33]);
        let mt = [0.05, -0.07, 0.02];
        let moved_boxes: Vec<ExtrusionBox<f64>> = boxes
            .iter()
            .map(|b| {
                // compose: world' = M(world): rotation mq then translation mt
                let new_c = geom::add3(geom::quat_rotate(mq, b.center), mt);
                // quaternion product mq ⊗ b.quat
                let (w1, x1, y1, z1) = (mq[0], mq[1], mq[2], mq[3]);
                let (w2, x2, y2, z2) = (b.quat[0], b.quat[1], b.quat[2], b.quat[3]);
                let q = [
                    w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
                    w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                    w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
                    w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
                ];
                ExtrusionBox {
                    size: b.size,
                    center: new_c,
                    quat: geom::quat_normalize(q),
                }
            })
            .collect();
        let moved_pts: Vec<[f64; 3]> = pts
            .iter()
            .map(|p| geom::add3(geom::quat_rotate(mq, *p), mt))
            .collect();
        let moved = m
            .forward_points_boxes(CodeRef::Stored(0), &moved_boxes, &moved_pts, &fp)
            .unwrap();
        for (a, b) in base.o_total.iter().zip(&moved.o_total) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        for h in 0..2 {
            for (a, b) in base.cyl_sdf[h].iter().zip(&moved.cyl_sdf[h]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn union_monotone_in_a_dominating_occupancy() {
        // increasing an occupancy that is ≥ the current union value never
        // decreases the union (the derivative σⱼ(1 + φ(xⱼ − u)) is positive
        // there; below u − 1/φ the softmax trade-off can locally reverse)
        let mut r = rng::stream(77, 0);
        for _ in 0..200 {
            let mut occs: Vec<f64> = (0..4).map(|_| rng::unit(&mut r)).collect();
            let u = fieldops::soft_union(&occs, 25.0);
            let j = (0..4)
                .max_by(|&a, &b| occs[a].partial_cmp(&occs[b]).unwrap())
                .unwrap();
            assert!(occs[j] >= u - 1e-12);
            let delta = 0.2 * rng::unit::<f64>(&mut r) * (1.0 - occs[j]);
            occs[j] += delta;
            let u2 = fieldops::soft_union(&occs, 25.0);
            assert!(u2 >= u - 1e-12, "{u2} < {u}");
        }
    }

    #[test]
    fn forward_gradients_match_finite_differences() {
        let cfg = ModelConfig {
            heads: 2,
            hidden: 12,
            layers: 4,
            latent: 6,
        };
        let m: SecadModel<f64> = SecadModel::init(cfg, 1, 33);
        let fp = FieldParams {
            eta: 20.0, // gentler slope keeps round-off in central differences small
            phi: 25.0,
        };
        let mut r = rng::stream(8, 0);
        let pts: Vec<[f64; 3]> = (0..64)
            .map(|_| {
                [
                    rng::uniform(&mut r, -0.5, 0.5),
                    rng::uniform(&mut r, -0.5, 0.5),
                    rng::uniform(&mut r, -0.5, 0.5),
                ]
            })
            .collect();
        let build = |ctx: &mut Ctx<'_, f64>| {
            let vars = m.build_forward(ctx, &CodeRef::Stored(0), &pts, &fp, None)?;
            ctx.mean_sq(vars.o_hat)
        };
        // ε balances sigmoid-sharpened truncation (∝ε²) against round-off
        // cancellation (∝1/ε) for this loss scale
        let err = finite_diff_check(&m.params, build, 1e-4, 120, 17).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }
}
