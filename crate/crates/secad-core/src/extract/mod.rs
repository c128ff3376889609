//! Convert a fitted model into editable CAD: per-head profile rasters, loop
//! tracing with hierarchy, dominant-point simplification, closed B-spline
//! fitting, assembly of extruded primitives into a CSG tree, and the
//! post-processing rules that drop shredded or duplicated cylinders.

pub mod bspline;
pub mod contour;
pub mod simplify;

use crate::model::{CodeRef, ExtrusionBox, SecadModel};
use crate::rng;
use crate::scalar::Real;
use crate::tape::TapeError;
use bspline::PeriodicBspline;
use contour::LoopHierarchy;
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error(transparent)]
    Tape(#[from] TapeError),
}

#[derive(Debug, Clone, Copy, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default, bound = "")]
pub struct ExtractConfig<T: Real> {
    /// Profile raster resolution per axis.
    pub res: usize,
    /// Window half-extent multiplier on (l/2, w/2).
    pub window_margin: T,
    /// Spline residual budget factor: s = factor · vertices · cell².
    pub smoothing_factor: T,
    /// Monte Carlo samples per volume estimate in post-processing.
    pub mc_samples: usize,
    /// Noise-loop thresholds.
    pub min_loop_vertices: usize,
    pub min_loop_area_cells: T,
    /// Cylinders shorter than this full height are dropped.
    pub min_height: T,
    /// Overlap coefficient above which the smaller cylinder is dropped.
    pub overlap_threshold: T,
    pub seed: u64,
}

impl<T: Real> Default for ExtractConfig<T> {
    fn default() -> Self {
        Self {
            res: 256,
            window_margin: T::of(1.2),
            smoothing_factor: T::of(0.25),
            mc_samples: 100_000,
            min_loop_vertices: 8,
            min_loop_area_cells: T::of(4.0),
            min_height: T::of(0.01),
            overlap_threshold: T::of(0.95),
            seed: 0,
        }
    }
}

/// Sketch SDF sampled at the cell centers of a window around one box's
/// sketch plane.
#[derive(Debug, Clone)]
pub struct ProfileRaster<T> {
    pub res: usize,
    /// x-fastest samples.
    pub values: Vec<T>,
    pub half_l: T,
    pub half_w: T,
}

impl<T: Real> ProfileRaster<T> {
    /// Plane coordinate of sample (i, j).
    pub fn coord(&self, i: usize, j: usize) -> [T; 2] {
        [
            self.x_of(T::of(i as f64)),
            self.y_of(T::of(j as f64)),
        ]
    }

    /// Continuous lattice → plane coordinates.
    pub fn x_of(&self, u: T) -> T {
        let cell = self.half_l * T::of(2.0) / T::of(self.res as f64);
        -self.half_l + (u + T::of(0.5)) * cell
    }

    pub fn y_of(&self, v: T) -> T {
        let cell = self.half_w * T::of(2.0) / T::of(self.res as f64);
        -self.half_w + (v + T::of(0.5)) * cell
    }

    pub fn cell_size(&self) -> [T; 2] {
        let two = T::of(2.0);
        [
            self.half_l * two / T::of(self.res as f64),
            self.half_w * two / T::of(self.res as f64),
        ]
    }

    /// Bilinear interpolation; outside the window counts as outside (+1).
    pub fn sample(&self, p: [T; 2]) -> T {
        if p[0].abs() > self.half_l || p[1].abs() > self.half_w {
            return T::one();
        }
        let res = self.res;
        let cell = self.cell_size();
        let u = (p[0] + self.half_l) / cell[0] - T::of(0.5);
        let v = (p[1] + self.half_w) / cell[1] - T::of(0.5);
        let clampi = |x: T| -> (usize, usize, T) {
            let f = x.floor();
            let t = x - f;
            let i = f.to_f64().map(|v| v as isize).unwrap_or(0);
            let i0 = i.clamp(0, res as isize - 1) as usize;
            let i1 = (i + 1).clamp(0, res as isize - 1) as usize;
            (i0, i1, t)
        };
        let (i0, i1, tx) = clampi(u);
        let (j0, j1, ty) = clampi(v);
        let at = |i: usize, j: usize| self.values[j * res + i];
        let a = at(i0, j0) * (T::one() - tx) + at(i1, j0) * tx;
        let b = at(i0, j1) * (T::one() - tx) + at(i1, j1) * tx;
        a * (T::one() - ty) + b * ty
    }
}

/// A closed B-spline profile loop with its nesting depth.
#[derive(Debug, Clone)]
pub struct BsplineLoop<T> {
    pub spline: PeriodicBspline<T>,
    pub depth: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveRole {
    Additive,
    Subtractive,
}

/// One extruded loop: the leaf of the CSG tree.
#[derive(Debug, Clone)]
pub struct CylinderPrimitive<T> {
    pub id: usize,
    /// Index into [`CadModel::heads`].
    pub head: usize,
    pub loop_index: usize,
    pub half_height: T,
    pub role: PrimitiveRole,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CsgNode {
    Leaf(usize),
    Union(Vec<CsgNode>),
    Difference(Box<CsgNode>, Box<CsgNode>),
}

impl CsgNode {
    pub fn leaf_count(&self) -> usize {
        match self {
            CsgNode::Leaf(_) => 1,
            CsgNode::Union(cs) => cs.iter().map(|c| c.leaf_count()).sum(),
            CsgNode::Difference(a, b) => a.leaf_count() + b.leaf_count(),
        }
    }
}

/// Everything extracted for one head.
#[derive(Debug, Clone)]
pub struct HeadExtraction<T> {
    /// Original head index in the model.
    pub head: usize,
    pub box_: ExtrusionBox<T>,
    pub raster: ProfileRaster<T>,
    pub hierarchy: LoopHierarchy<T>,
    pub loops: Vec<BsplineLoop<T>>,
}

impl<T: Real> HeadExtraction<T> {
    /// Hard inside test for the extruded cylinder of this head: negative
    /// interpolated sketch SDF within the height slab. The raster encodes
    /// holes (positive inside them), so depth parity is respected.
    pub fn contains_world(&self, p: [T; 3]) -> bool {
        let local = self.box_.to_local(p);
        if local[2].abs() >= self.box_.half_height() {
            return false;
        }
        self.raster.sample([local[0], local[1]]) < T::zero()
    }

    /// Axis-aligned local sampling volume (the raster window × the slab).
    fn window_volume(&self) -> T {
        let two = T::of(2.0);
        (two * self.half_l()) * (two * self.half_w()) * (two * self.box_.half_height())
    }

    fn half_l(&self) -> T {
        self.raster.half_l
    }

    fn half_w(&self) -> T {
        self.raster.half_w
    }
}

/// The editable CAD output: per-head sketches, primitives, and the tree.
#[derive(Debug, Clone)]
pub struct CadModel<T> {
    pub heads: Vec<HeadExtraction<T>>,
    pub primitives: Vec<CylinderPrimitive<T>>,
    pub tree: Option<CsgNode>,
    pub warnings: Vec<String>,
}

impl<T: Real> CadModel<T> {
    pub fn primitive_count(&self) -> usize {
        self.primitives.len()
    }
}

/// Rasterize head `i`'s sketch SDF over its box window.
pub fn raster_profile<T: Real>(
    model: &SecadModel<T>,
    code: &CodeRef<'_, T>,
    head: usize,
    box_: &ExtrusionBox<T>,
    cfg: &ExtractConfig<T>,
) -> Result<ProfileRaster<T>, ExtractError> {
    assert!(cfg.res >= 16, "raster resolution too small");
    let half_l = box_.length() / T::of(2.0) * cfg.window_margin;
    let half_w = box_.width() / T::of(2.0) * cfg.window_margin;
    let raster = ProfileRaster {
        res: cfg.res,
        values: Vec::new(),
        half_l,
        half_w,
    };
    let mut pts = Vec::with_capacity(cfg.res * cfg.res);
    for j in 0..cfg.res {
        for i in 0..cfg.res {
            pts.push(raster.coord(i, j));
        }
    }
    let values = model.sketch_sdf_batch(head, &pts, clone_code(code))?;
    Ok(ProfileRaster { values, ..raster })
}

fn clone_code<'a, T>(code: &CodeRef<'a, T>) -> CodeRef<'a, T> {
    match code {
        CodeRef::Stored(c) => CodeRef::Stored(*c),
        CodeRef::Values(v) => CodeRef::Values(v),
    }
}

/// Full sketch-extrude extraction (no post-processing): raster, trace,
/// simplify, fit, assemble.
pub fn extract_cad<T: Real>(
    model: &SecadModel<T>,
    code: CodeRef<'_, T>,
    cfg: &ExtractConfig<T>,
) -> Result<CadModel<T>, ExtractError> {
    let boxes = match &code {
        CodeRef::Stored(c) => model.decode_boxes(*c),
        CodeRef::Values(v) => model.decode_boxes_from(v),
    };
    let mut heads = Vec::new();
    let mut warnings = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        if !(b.length() > T::zero() && b.width() > T::zero() && b.half_height() > T::zero()) {
            warnings.push(format!("head {i}: degenerate box size, skipped"));
            continue;
        }
        let raster = raster_profile(model, &code, i, b, cfg)?;
        let hierarchy = contour::trace_loops(
            &raster.values,
            cfg.res,
            T::zero(),
            cfg.min_loop_vertices,
            cfg.min_loop_area_cells,
        );
        for (li, l) in hierarchy.loops.iter().enumerate() {
            if l.clipped {
                warnings.push(format!(
                    "head {i}: loop {li} clipped closed along the window boundary"
                ));
            }
        }
        let cell = raster.cell_size();
        let cell_sq = cell[0] * cell[1];
        let mut loops = Vec::new();
        for (li, l) in hierarchy.loops.iter().enumerate() {
            // lattice → plane coordinates
            let plane: Vec<[T; 2]> = l
                .points
                .iter()
                .map(|p| [raster.x_of(p[0]), raster.y_of(p[1])])
                .collect();
            let kept = simplify::simplify_loop(&plane);
            let smoothing = cfg.smoothing_factor * T::of(kept.len() as f64) * cell_sq;
            match bspline::fit_closed(&kept, smoothing) {
                Ok(out) => loops.push(BsplineLoop {
                    spline: out.spline,
                    depth: l.depth,
                }),
                Err(e) => warnings.push(format!("head {i}: loop {li} dropped ({e})")),
            }
        }
        heads.push(HeadExtraction {
            head: i,
            box_: *b,
            raster,
            hierarchy,
            loops,
        });
    }
    let (primitives, tree) = assemble(&heads);
    Ok(CadModel {
        heads,
        primitives,
        tree,
        warnings,
    })
}

/// Assemble per-head cylinders: per head, even-depth loops add material and
/// odd-depth loops subtract, alternating as depth increases; the root is the
/// union over heads that produced loops.
pub fn assemble<T: Real>(heads: &[HeadExtraction<T>]) -> (Vec<CylinderPrimitive<T>>, Option<CsgNode>) {
    let mut primitives = Vec::new();
    let mut head_nodes = Vec::new();
    for (hi, h) in heads.iter().enumerate() {
        if h.loops.is_empty() {
            continue;
        }
        let mut by_depth: Vec<Vec<usize>> = Vec::new();
        for (li, l) in h.loops.iter().enumerate() {
            let id = primitives.len();
            primitives.push(CylinderPrimitive {
                id,
                head: hi,
                loop_index: li,
                half_height: h.box_.half_height(),
                role: if l.depth % 2 == 0 {
                    PrimitiveRole::Additive
                } else {
                    PrimitiveRole::Subtractive
                },
            });
            if by_depth.len() <= l.depth {
                by_depth.resize(l.depth + 1, Vec::new());
            }
            by_depth[l.depth].push(id);
        }
        let union_of = |ids: &[usize]| -> Option<CsgNode> {
            match ids.len() {
                0 => None,
                1 => Some(CsgNode::Leaf(ids[0])),
                _ => Some(CsgNode::Union(
                    ids.iter().map(|&i| CsgNode::Leaf(i)).collect(),
                )),
            }
        };
        let mut node: Option<CsgNode> = None;
        for (depth, ids) in by_depth.iter().enumerate() {
            let Some(level) = union_of(ids) else { continue };
            node = Some(match node {
                None => level,
                Some(acc) if depth % 2 == 1 => {
                    CsgNode::Difference(Box::new(acc), Box::new(level))
                }
                Some(acc) => CsgNode::Union(vec![acc, level]),
            });
        }
        if let Some(n) = node {
            head_nodes.push(n);
        }
    }
    let tree = match head_nodes.len() {
        0 => None,
        1 => Some(head_nodes.pop().unwrap()),
        _ => Some(CsgNode::Union(head_nodes)),
    };
    (primitives, tree)
}

/// Estimated volume of one head's cylinder by Monte Carlo membership over
/// its own window box.
fn estimate_volume<T: Real>(h: &HeadExtraction<T>, samples: usize, seed: u64) -> T {
    let mut r = rng::stream(seed, 0);
    let mut hits = 0usize;
    for _ in 0..samples {
        let p = sample_in_window(h, &mut r);
        if h.contains_world(p) {
            hits += 1;
        }
    }
    T::of(hits as f64 / samples as f64) * h.window_volume()
}

fn sample_in_window<T: Real>(
    h: &HeadExtraction<T>,
    r: &mut rand_chacha::ChaCha8Rng,
) -> [T; 3] {
    let local = [
        rng::uniform(r, -h.half_l(), h.half_l()),
        rng::uniform(r, -h.half_w(), h.half_w()),
        rng::uniform(r, -h.box_.half_height(), h.box_.half_height()),
    ];
    h.box_.to_world(local)
}

/// Post-processing: (1) drop cylinders whose full extrusion height is below
/// the threshold; (2) estimate pairwise overlap coefficients
/// V(A∩B)/min(V(A),V(B)) by point sampling and drop the smaller cylinder of
/// any pair above the threshold, repeating until stable. Deterministic per
/// seed and idempotent on its own output.
pub fn postprocess<T: Real>(cad: &CadModel<T>, cfg: &ExtractConfig<T>) -> CadModel<T> {
    let mut warnings = cad.warnings.clone();
    let mut alive: Vec<bool> = cad
        .heads
        .iter()
        .map(|h| {
            let keep = T::of(2.0) * h.box_.half_height() >= cfg.min_height;
            if !keep {
                warnings.push(format!(
                    "head {}: dropped (extrusion height below {:?})",
                    h.head, cfg.min_height
                ));
            }
            keep && !h.loops.is_empty()
        })
        .collect();

    // stable per-head volume estimates keyed by the original head index
    let volumes: Vec<T> = cad
        .heads
        .iter()
        .map(|h| {
            estimate_volume(
                h,
                cfg.mc_samples,
                rng::mix_seed(&[cfg.seed, 0x70, h.head as u64]),
            )
        })
        .collect();

    loop {
        let mut dropped = false;
        let live: Vec<usize> = (0..cad.heads.len()).filter(|&i| alive[i]).collect();
        'pairs: for ai in 0..live.len() {
            for bi in ai + 1..live.len() {
                let (a, b) = (live[ai], live[bi]);
                let (va, vb) = (volumes[a], volumes[b]);
                let vmin = if va <= vb { va } else { vb };
                if vmin <= T::zero() {
                    continue;
                }
                let small = if va <= vb { a } else { b };
                let other = if small == a { b } else { a };
                // sample inside the smaller cylinder's window
                let pair_seed = rng::mix_seed(&[
                    cfg.seed,
                    cad.heads[a].head as u64,
                    cad.heads[b].head as u64,
                ]);
                let mut r = rng::stream(pair_seed, 1);
                let hs = &cad.heads[small];
                let mut both = 0usize;
                for _ in 0..cfg.mc_samples {
                    let p = sample_in_window(hs, &mut r);
                    if hs.contains_world(p) && cad.heads[other].contains_world(p) {
                        both += 1;
                    }
                }
                let inter = T::of(both as f64 / cfg.mc_samples as f64) * hs.window_volume();
                let coeff = inter / vmin;
                if coeff > cfg.overlap_threshold {
                    alive[small] = false;
                    warnings.push(format!(
                        "head {}: dropped (overlap {:?} with head {})",
                        cad.heads[small].head,
                        coeff,
                        cad.heads[other].head
                    ));
                    dropped = true;
                    break 'pairs;
                }
            }
        }
        if !dropped {
            break;
        }
    }

    let heads: Vec<HeadExtraction<T>> = cad
        .heads
        .iter()
        .zip(&alive)
        .filter(|(_, &a)| a)
        .map(|(h, _)| h.clone())
        .collect();
    let (primitives, tree) = assemble(&heads);
    CadModel {
        heads,
        primitives,
        tree,
        warnings,
    }
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

/// One SVG per head: spline loops as cubic Bézier paths, holes via the
/// even-odd fill rule.
pub fn head_svg<T: Real>(h: &HeadExtraction<T>) -> String {
    let (hl, hw) = (h.raster.half_l, h.raster.half_w);
    let mut d = String::new();
    for l in &h.loops {
        let bez = l.spline.to_beziers();
        if bez.is_empty() {
            continue;
        }
        let p0 = bez[0][0];
        d.push_str(&format!("M {:?} {:?} ", p0[0], p0[1]));
        for seg in &bez {
            d.push_str(&format!(
                "C {:?} {:?}, {:?} {:?}, {:?} {:?} ",
                seg[1][0], seg[1][1], seg[2][0], seg[2][1], seg[3][0], seg[3][1]
            ));
        }
        d.push_str("Z ");
    }
    let (w, hgt) = (hl + hl, hw + hw);
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"{:?} {:?} {:?} {:?}\">\n",
            "  <path d=\"{}\" fill=\"#4477aa\" fill-rule=\"evenodd\" stroke=\"#113355\" stroke-width=\"{:?}\"/>\n",
            "</svg>\n"
        ),
        -hl,
        -hw,
        w,
        hgt,
        d.trim_end(),
        w * T::of(0.004),
    )
}

/// Sketch document: per head pose, sizes, and the fitted loops.
pub fn sketches_json<T: Real>(cad: &CadModel<T>) -> serde_json::Value {
    let heads: Vec<serde_json::Value> = cad
        .heads
        .iter()
        .map(|h| {
            let loops: Vec<serde_json::Value> = h
                .loops
                .iter()
                .map(|l| {
                    json!({
                        "depth": l.depth,
                        "degree": 3,
                        "periodic": true,
                        "control_points": l.spline.control
                            .iter()
                            .map(|p| vec![dec(p[0]), dec(p[1])])
                            .collect::<Vec<_>>(),
                        "knots": l.spline.knots().iter().map(|k| dec(*k)).collect::<Vec<_>>(),
                    })
                })
                .collect();
            json!({
                "head": h.head,
                "center": h.box_.center.iter().map(|v| dec(*v)).collect::<Vec<_>>(),
                "quaternion": h.box_.quat.iter().map(|v| dec(*v)).collect::<Vec<_>>(),
                "size": {
                    "length": dec(h.box_.length()),
                    "width": dec(h.box_.width()),
                    "half_height": dec(h.box_.half_height()),
                },
                "loops": loops,
            })
        })
        .collect();
    json!({ "heads": heads, "warnings": cad.warnings })
}

/// CSG document: nested union/difference nodes over primitive leaves.
pub fn csg_json<T: Real>(cad: &CadModel<T>) -> serde_json::Value {
    fn node_json(n: &CsgNode) -> serde_json::Value {
        match n {
            CsgNode::Leaf(id) => json!({ "leaf": id }),
            CsgNode::Union(cs) => json!({
                "op": "union",
                "children": cs.iter().map(node_json).collect::<Vec<_>>(),
            }),
            CsgNode::Difference(a, b) => json!({
                "op": "difference",
                "children": [node_json(a), node_json(b)],
            }),
        }
    }
    let prims: Vec<serde_json::Value> = cad
        .primitives
        .iter()
        .map(|p| {
            json!({
                "id": p.id,
                "head": cad.heads[p.head].head,
                "loop": p.loop_index,
                "half_height": dec(p.half_height),
                "role": p.role,
            })
        })
        .collect();
    json!({
        "primitives": prims,
        "tree": cad.tree.as_ref().map(|t| node_json(t)),
    })
}

fn dec<T: Real>(v: T) -> serde_json::Value {
    serde_json::Value::String(v.to_decimal())
}

/// Rasterize spline loops back onto a res×res cell-center grid with the
/// even-odd rule (scanline). Used for round-trip fidelity checks.
pub fn rasterize_loops<T: Real>(
    loops: &[BsplineLoop<T>],
    res: usize,
    half_l: T,
    half_w: T,
) -> Vec<bool> {
    let polys: Vec<Vec<[T; 2]>> = loops
        .iter()
        .map(|l| l.spline.sample((l.spline.k() * 16).max(256)))
        .collect();
    let mut out = vec![false; res * res];
    let cell_w = half_l * T::of(2.0) / T::of(res as f64);
    let cell_h = half_w * T::of(2.0) / T::of(res as f64);
    let mut xs: Vec<T> = Vec::new();
    for j in 0..res {
        let y = -half_w + (T::of(j as f64) + T::of(0.5)) * cell_h;
        xs.clear();
        for poly in &polys {
            let n = poly.len();
            for i in 0..n {
                let (a, b) = (poly[i], poly[(i + 1) % n]);
                if (a[1] > y) != (b[1] > y) {
                    xs.push(a[0] + (y - a[1]) / (b[1] - a[1]) * (b[0] - a[0]));
                }
            }
        }
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for pair in xs.chunks_exact(2) {
            let (x0, x1) = (pair[0], pair[1]);
            let i0 = ((x0 + half_l) / cell_w - T::of(0.5)).ceil();
            let i1 = ((x1 + half_l) / cell_w - T::of(0.5)).floor();
            let i0 = i0.to_f64().map(|v| v as isize).unwrap_or(0).max(0) as usize;
            let i1 = i1
                .to_f64()
                .map(|v| v as isize)
                .unwrap_or(-1)
                .min(res as isize - 1);
            let mut i = i0 as isize;
            while i <= i1 {
                out[j * res + i as usize] = !out[j * res + i as usize];
                i += 1;
            }
        }
    }
    out
}
