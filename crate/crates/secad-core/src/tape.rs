//! Parameter storage, reverse-mode gradient evaluation for the fixed
//! fitting graph, the Adam optimizer, and a finite-difference checker.
//!
//! The tape is define-by-run over batched matrix nodes: each builder call
//! computes its forward value immediately, so a program's value is known as
//! soon as it is built, and `evaluate` optionally runs the reverse sweep.
//! Reductions use fixed-size row chunks combined in index order, which makes
//! results independent of the rayon thread count. Forward values are
//! identical whether or not gradients are requested — both paths run the
//! same code.

use crate::fieldops;
use crate::geom;
use crate::rng;
use crate::scalar::{fmax, fmin, Real};
use rayon::prelude::*;
use std::sync::Arc;
use thiserror::Error;

/// Rows per parallel work unit. Fixed so chunk boundaries (and with them the
/// floating-point reduction order) never depend on the thread count.
const ROW_CHUNK: usize = 1024;
/// Below this many elements an elementwise op runs serially.
const PAR_MIN: usize = 1 << 14;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("non-finite value produced by primitive `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("validation: {0}")]
    Validation(String),
}

// ---------------------------------------------------------------------------
// Parameter layout and store
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SegId(pub usize);

#[derive(Debug, Clone)]
pub struct Segment {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named flat segments of scalars; the shape metadata every parameter store,
/// gradient vector, and Adam accumulator shares.
#[derive(Debug, Default)]
pub struct Layout {
    segs: Vec<Segment>,
    total: usize,
}

impl Layout {
    pub fn builder() -> LayoutBuilder {
        LayoutBuilder::default()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segs
    }

    pub fn seg(&self, id: SegId) -> &Segment {
        &self.segs[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<SegId> {
        self.segs.iter().position(|s| s.name == name).map(SegId)
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

#[derive(Default)]
pub struct LayoutBuilder {
    segs: Vec<Segment>,
    total: usize,
}

impl LayoutBuilder {
    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> SegId {
        let name = name.into();
        assert!(
            !self.segs.iter().any(|s| s.name == name),
            "duplicate segment name {name}"
        );
        assert!(rows * cols > 0, "empty segment {name}");
        let seg = Segment {
            name,
            rows,
            cols,
            offset: self.total,
        };
        self.total += seg.len();
        self.segs.push(seg);
        SegId(self.segs.len() - 1)
    }

    pub fn build(self) -> Arc<Layout> {
        Arc::new(Layout {
            segs: self.segs,
            total: self.total,
        })
    }
}

/// All trainable scalars, flat, with a shared layout.
#[derive(Debug, Clone)]
pub struct ParameterStore<T> {
    layout: Arc<Layout>,
    values: Vec<T>,
}

impl<T: Real> ParameterStore<T> {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let n = layout.total();
        Self {
            layout,
            values: vec![T::zero(); n],
        }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn segment(&self, id: SegId) -> &[T] {
        let s = self.layout.seg(id);
        &self.values[s.offset..s.offset + s.len()]
    }

    pub fn segment_mut(&mut self, id: SegId) -> &mut [T] {
        let s = self.layout.seg(id).clone();
        &mut self.values[s.offset..s.offset + s.len()]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Real> Default for AdamConfig<T> {
    fn default() -> Self {
        Self {
            lr: T::of(1e-4),
            beta1: T::of(0.5),
            beta2: T::of(0.99),
            eps: T::of(1e-8),
        }
    }
}

/// First/second-moment accumulators in parameter layout plus the step count.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub cfg: AdamConfig<T>,
    pub t: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(cfg: AdamConfig<T>, n_params: usize) -> Self {
        Self {
            cfg,
            t: 0,
            m: vec![T::zero(); n_params],
            v: vec![T::zero(); n_params],
        }
    }

    /// One Adam update with bias correction:
    /// m ← β₁m + (1−β₁)g, v ← β₂v + (1−β₂)g², θ ← θ − lr·m̂/(√v̂ + ε).
    pub fn step(&mut self, params: &mut ParameterStore<T>, grads: &[T]) -> Result<(), TapeError> {
        let n = params.values().len();
        if grads.len() != n || self.m.len() != n {
            return Err(TapeError::Contract(format!(
                "layout mismatch: params {n}, grads {}, moments {}",
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let one = T::one();
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = one - b1.powi(self.t as i32);
        let bc2 = one - b2.powi(self.t as i32);
        let lr = self.cfg.lr;
        let eps = self.cfg.eps;
        let theta = params.values_mut();
        for i in 0..n {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            theta[i] = theta[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Param {
        seg: SegId,
    },
    Constant,
    /// y = x·wᵀ (+ b); x: n×k, w: m×k, b: 1×m.
    Affine {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
    },
    /// y = x + r with the 1×c row broadcast over rows.
    AddRow {
        x: VarId,
        r: VarId,
    },
    Softplus {
        x: VarId,
    },
    Sigmoid {
        x: VarId,
    },
    Tanh {
        x: VarId,
    },
    Abs {
        x: VarId,
    },
    Clamp {
        x: VarId,
        lo: T,
        hi: T,
    },
    Scale {
        x: VarId,
        c: T,
    },
    Offset {
        x: VarId,
    },
    Add {
        x: VarId,
        y: VarId,
    },
    Sub {
        x: VarId,
        y: VarId,
    },
    Max {
        x: VarId,
        y: VarId,
    },
    Min {
        x: VarId,
        y: VarId,
    },
    MaxConst {
        x: VarId,
        c: T,
    },
    MinConst {
        x: VarId,
        c: T,
    },
    Hypot {
        x: VarId,
        y: VarId,
    },
    Cols {
        x: VarId,
        start: usize,
        len: usize,
    },
    ConcatCols {
        xs: Vec<VarId>,
    },
    Gather {
        x: VarId,
        rows: Arc<Vec<u32>>,
    },
    /// y = R(q/‖q‖)ᵀ·(p − c) per row of p; q: 1×4 raw, c: 1×3, p: n×3.
    InvTransform {
        q: VarId,
        c: VarId,
        p: VarId,
    },
    SoftUnion {
        x: VarId,
        phi: T,
    },
    MeanSq {
        x: VarId,
    },
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Param { .. } => "param",
        Op::Constant => "constant",
        Op::Affine { .. } => "affine",
        Op::AddRow { .. } => "add_row",
        Op::Softplus { .. } => "softplus",
        Op::Sigmoid { .. } => "sigmoid",
        Op::Tanh { .. } => "tanh",
        Op::Abs { .. } => "abs",
        Op::Clamp { .. } => "clamp",
        Op::Scale { .. } => "scale",
        Op::Offset { .. } => "offset",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Max { .. } => "max",
        Op::Min { .. } => "min",
        Op::MaxConst { .. } => "max_const",
        Op::MinConst { .. } => "min_const",
        Op::Hypot { .. } => "hypot",
        Op::Cols { .. } => "cols",
        Op::ConcatCols { .. } => "concat_cols",
        Op::Gather { .. } => "gather",
        Op::InvTransform { .. } => "inv_transform",
        Op::SoftUnion { .. } => "soft_union",
        Op::MeanSq { .. } => "mean_sq",
    }
}

struct Node<T> {
    op: Op<T>,
    rows: usize,
    cols: usize,
    val: Vec<T>,
    adj: Vec<T>,
    needs_grad: bool,
}

/// Reusable evaluation tape. Node buffers persist across evaluations, so a
/// fitting loop that rebuilds the same program every epoch allocates once.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    live: usize,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            live: 0,
        }
    }

    /// Build and forward-evaluate a scalar program, then optionally run the
    /// reverse sweep. Returns the scalar value and, if requested, gradients
    /// in parameter layout.
    pub fn evaluate<F>(
        &mut self,
        params: &ParameterStore<T>,
        want_grad: bool,
        build: F,
    ) -> Result<(T, Option<Vec<T>>), TapeError>
    where
        F: FnOnce(&mut Ctx<'_, T>) -> Result<VarId, TapeError>,
    {
        self.live = 0;
        let root = {
            let mut ctx = Ctx {
                tape: self,
                params,
                param_nodes: vec![None; params.layout().segments().len()],
            };
            build(&mut ctx)?
        };
        let rn = &self.nodes[root.0];
        assert!(
            rn.rows == 1 && rn.cols == 1,
            "loss program must end in a scalar node"
        );
        let value = rn.val[0];
        if !want_grad {
            return Ok((value, None));
        }

        for node in self.nodes[..self.live].iter_mut() {
            if node.needs_grad {
                node.adj.clear();
                node.adj.resize(node.val.len(), T::zero());
            }
        }
        self.nodes[root.0].adj[0] = T::one();
        for i in (0..self.live).rev() {
            self.backward(i);
        }

        let mut grads = vec![T::zero(); params.layout().total()];
        for node in self.nodes[..self.live].iter() {
            if let Op::Param { seg } = node.op {
                let s = params.layout().seg(seg);
                grads[s.offset..s.offset + s.len()].copy_from_slice(&node.adj);
            }
        }
        Ok((value, Some(grads)))
    }

    pub fn value(&self, id: VarId) -> &[T] {
        &self.nodes[id.0].val
    }

    fn push(&mut self, op: Op<T>, rows: usize, cols: usize, needs_grad: bool) -> VarId {
        let n = rows * cols;
        if self.live < self.nodes.len() {
            let node = &mut self.nodes[self.live];
            node.op = op;
            node.rows = rows;
            node.cols = cols;
            node.needs_grad = needs_grad;
            node.val.clear();
            node.val.resize(n, T::zero());
        } else {
            self.nodes.push(Node {
                op,
                rows,
                cols,
                val: vec![T::zero(); n],
                adj: Vec::new(),
                needs_grad,
            });
        }
        self.live += 1;
        VarId(self.live - 1)
    }

    fn shape(&self, id: VarId) -> (usize, usize) {
        (self.nodes[id.0].rows, self.nodes[id.0].cols)
    }

    fn grad_of(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn check_finite(&self, id: VarId) -> Result<VarId, TapeError> {
        let node = &self.nodes[id.0];
        let ok = node.val.iter().fold(true, |a, v| a & v.is_finite());
        if ok {
            Ok(id)
        } else {
            Err(TapeError::NonFinite {
                op: op_name(&node.op),
                node: id.0,
            })
        }
    }

    fn backward(&mut self, i: usize) {
        if !self.nodes[i].needs_grad {
            return;
        }
        let (head, tail) = self.nodes.split_at_mut(i);
        let node = &tail[0];
        let (rows, cols) = (node.rows, node.cols);
        match node.op.clone() {
            Op::Param { .. } | Op::Constant => {}
            Op::Affine { x, w, b } => {
                let k = head[x.0].cols;
                let m = head[w.0].rows;
                if head[w.0].needs_grad {
                    // w̄ += ȳᵀ·x via per-chunk partials combined in order
                    let partials: Vec<Vec<T>> = node
                        .adj
                        .par_chunks(ROW_CHUNK * m)
                        .zip(head[x.0].val.par_chunks(ROW_CHUNK * k))
                        .map(|(gy, xs)| {
                            let rows_here = gy.len() / m;
                            let mut part = vec![T::zero(); m * k];
                            T::gemm(
                                m,
                                rows_here,
                                k,
                                T::one(),
                                gy,
                                1,
                                m as isize,
                                xs,
                                k as isize,
                                1,
                                &mut part,
                                k as isize,
                                1,
                            );
                            part
                        })
                        .collect();
                    let wadj = &mut head[w.0].adj;
                    for part in partials {
                        for (a, p) in wadj.iter_mut().zip(part) {
                            *a += p;
                        }
                    }
                }
                if head[x.0].needs_grad {
                    // x̄ += ȳ·w
                    let wvals = head[w.0].val.clone();
                    head[x.0]
                        .adj
                        .par_chunks_mut(ROW_CHUNK * k)
                        .zip(node.adj.par_chunks(ROW_CHUNK * m))
                        .for_each(|(gx, gy)| {
                            let rows_here = gy.len() / m;
                            T::gemm(
                                rows_here,
                                m,
                                k,
                                T::one(),
                                gy,
                                m as isize,
                                1,
                                &wvals,
                                k as isize,
                                1,
                                gx,
                                k as isize,
                                1,
                            );
                        });
                }
                if let Some(b) = b {
                    if head[b.0].needs_grad {
                        col_sum_into(&node.adj, m, &mut head[b.0].adj);
                    }
                }
            }
            Op::AddRow { x, r } => {
                if head[x.0].needs_grad {
                    axpy(&mut head[x.0].adj, &node.adj);
                }
                if head[r.0].needs_grad {
                    col_sum_into(&node.adj, cols, &mut head[r.0].adj);
                }
            }
            Op::Softplus { x } => {
                let xn = &mut head[x.0];
                if xn.needs_grad {
                    acc_from_src(&mut xn.adj, &xn.val, &node.adj, |x, g| {
                        g * fieldops::sigmoid(x)
                    });
                }
            }
            Op::Sigmoid { x } => {
                let xn = &mut head[x.0];
                if xn.needs_grad {
                    acc_from_src(&mut xn.adj, &node.val, &node.adj, |y, g| {
                        g * y * (T::one() - y)
                    });
                }
            }
            Op::Tanh { x } => {
                let xn = &mut head[x.0];
                if xn.needs_grad {
                    acc_from_src(&mut xn.adj, &node.val, &node.adj, |y, g| {
                        g * (T::one() - y * y)
                    });
                }
            }
            Op::Abs { x } => {
                let xn = &mut head[x.0];
                if xn.needs_grad {
                    acc_from_src(&mut xn.adj, &xn.val, &node.adj, |x, g| {
                        if x > T::zero() {
                            g
                        } else if x < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    });
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xn = &mut head[x.0];
                if xn.needs_grad {
                    acc_from_src(&mut xn.adj, &xn.val, &node.adj, move |x, g| {
                        if x >= lo && x <= hi {
                            g
                        } else {
                            T::zero()
                        }
                    });
                }
            }
            Op::Scale { x, c } => {
                let xn = &mut head[x.0];
                if xn.needs_grad {
                    acc_from_src(&mut xn.adj, &xn.val, &node.adj, move |_, g| g * c);
                }
            }
            Op::Offset { x } => {
                if head[x.0].needs_grad {
                    axpy(&mut head[x.0].adj, &node.adj);
                }
            }
            Op::Add { x, y } => {
                if head[x.0].needs_grad {
                    axpy(&mut head[x.0].adj, &node.adj);
                }
                if head[y.0].needs_grad {
                    axpy(&mut head[y.0].adj, &node.adj);
                }
            }
            Op::Sub { x, y } => {
                if head[x.0].needs_grad {
                    axpy(&mut head[x.0].adj, &node.adj);
                }
                if head[y.0].needs_grad {
                    for (a, g) in head[y.0].adj.iter_mut().zip(&node.adj) {
                        *a -= *g;
                    }
                }
            }
            Op::Max { x, y } => {
                // ties route to the first argument
                let xv = head[x.0].val.clone();
                if head[x.0].needs_grad {
                    let yv = head[y.0].val.clone();
                    let xadj = &mut head[x.0].adj;
                    for i in 0..xadj.len() {
                        if xv[i] >= yv[i] {
                            xadj[i] += node.adj[i];
                        }
                    }
                }
                if head[y.0].needs_grad {
                    let yn = &mut head[y.0];
                    for i in 0..yn.adj.len() {
                        if yn.val[i] > xv[i] {
                            yn.adj[i] += node.adj[i];
                        }
                    }
                }
            }
            Op::Min { x, y } => {
                let xv = head[x.0].val.clone();
                if head[x.0].needs_grad {
                    let yv = head[y.0].val.clone();
                    let xadj = &mut head[x.0].adj;
                    for i in 0..xadj.len() {
                        if xv[i] <= yv[i] {
                            xadj[i] += node.adj[i];
                        }
                    }
                }
                if head[y.0].needs_grad {
                    let yn = &mut head[y.0];
                    for i in 0..yn.adj.len() {
                        if yn.val[i] < xv[i] {
                            yn.adj[i] += node.adj[i];
                        }
                    }
                }
            }
            Op::MaxConst { x, c } => {
                let xn = &mut head[x.0];
                if xn.needs_grad {
                    acc_from_src(&mut xn.adj, &xn.val, &node.adj, move |x, g| {
                        if x >= c {
                            g
                        } else {
                            T::zero()
                        }
                    });
                }
            }
            Op::MinConst { x, c } => {
                let xn = &mut head[x.0];
                if xn.needs_grad {
                    acc_from_src(&mut xn.adj, &xn.val, &node.adj, move |x, g| {
                        if x <= c {
                            g
                        } else {
                            T::zero()
                        }
                    });
                }
            }
            Op::Hypot { x, y } => {
                let xv = head[x.0].val.clone();
                let yv = head[y.0].val.clone();
                if head[x.0].needs_grad {
                    let xadj = &mut head[x.0].adj;
                    for i in 0..xadj.len() {
                        let r = node.val[i];
                        if r > T::zero() {
                            xadj[i] += node.adj[i] * xv[i] / r;
                        }
                    }
                }
                if head[y.0].needs_grad {
                    let yadj = &mut head[y.0].adj;
                    for i in 0..yadj.len() {
                        let r = node.val[i];
                        if r > T::zero() {
                            yadj[i] += node.adj[i] * yv[i] / r;
                        }
                    }
                }
            }
            Op::Cols { x, start, len } => {
                let xn = &mut head[x.0];
                if xn.needs_grad {
                    let full = xn.cols;
                    for r in 0..rows {
                        for c in 0..len {
                            xn.adj[r * full + start + c] += node.adj[r * len + c];
                        }
                    }
                }
            }
            Op::ConcatCols { xs } => {
                let mut at = 0usize;
                for xi in xs {
                    let w = head[xi.0].cols;
                    if head[xi.0].needs_grad {
                        let xn = &mut head[xi.0];
                        for r in 0..rows {
                            for c in 0..w {
                                xn.adj[r * w + c] += node.adj[r * cols + at + c];
                            }
                        }
                    }
                    at += w;
                }
            }
            Op::Gather { x, rows: idx } => {
                let xn = &mut head[x.0];
                if xn.needs_grad {
                    for (out_r, &src) in idx.iter().enumerate() {
                        let s = src as usize;
                        for c in 0..cols {
                            xn.adj[s * cols + c] += node.adj[out_r * cols + c];
                        }
                    }
                }
            }
            Op::InvTransform { q, c, p } => {
                let q_raw: [T; 4] = head[q.0].val[..4].try_into().unwrap();
                let qn = geom::quat_normalize(q_raw);
                let rot = geom::quat_to_matrix(qn);
                let cv: [T; 3] = head[c.0].val[..3].try_into().unwrap();
                let jac = geom::quat_matrix_jacobian(qn);
                // per-chunk partials: Σū (for c̄), Σ vᵀ(dR/dq_k)ū (for q̄)
                let partials: Vec<([T; 3], [T; 4])> = node
                    .adj
                    .par_chunks(ROW_CHUNK * 3)
                    .zip(head[p.0].val.par_chunks(ROW_CHUNK * 3))
                    .map(|(gu, ps)| {
                        let mut s = [T::zero(); 3];
                        let mut gq = [T::zero(); 4];
                        for (g, pt) in gu.chunks_exact(3).zip(ps.chunks_exact(3)) {
                            let u_bar = [g[0], g[1], g[2]];
                            let v = geom::sub3([pt[0], pt[1], pt[2]], cv);
                            for a in 0..3 {
                                s[a] = s[a] + u_bar[a];
                            }
                            for (k, gqk) in gq.iter_mut().enumerate() {
                                *gqk = *gqk + geom::dot3(v, geom::mat_apply(&jac[k], u_bar));
                            }
                        }
                        (s, gq)
                    })
                    .collect();
                let mut s_total = [T::zero(); 3];
                let mut gq_total = [T::zero(); 4];
                for (s, gq) in partials {
                    for a in 0..3 {
                        s_total[a] = s_total[a] + s[a];
                    }
                    for a in 0..4 {
                        gq_total[a] = gq_total[a] + gq[a];
                    }
                }
                if head[c.0].needs_grad {
                    let rc = geom::mat_apply(&rot, s_total);
                    for a in 0..3 {
                        head[c.0].adj[a] -= rc[a];
                    }
                }
                if head[q.0].needs_grad {
                    // chain through q = q_raw / max(‖q_raw‖, 1e-8)
                    let n = (q_raw[0] * q_raw[0]
                        + q_raw[1] * q_raw[1]
                        + q_raw[2] * q_raw[2]
                        + q_raw[3] * q_raw[3])
                        .sqrt();
                    let floor = T::of(1e-8);
                    let qadj = &mut head[q.0].adj;
                    if n >= floor {
                        let dot = (0..4).fold(T::zero(), |a, i| a + qn[i] * gq_total[i]);
                        for i in 0..4 {
                            qadj[i] += (gq_total[i] - qn[i] * dot) / n;
                        }
                    } else {
                        for i in 0..4 {
                            qadj[i] += gq_total[i] / floor;
                        }
                    }
                }
                if head[p.0].needs_grad {
                    head[p.0]
                        .adj
                        .par_chunks_mut(ROW_CHUNK * 3)
                        .zip(node.adj.par_chunks(ROW_CHUNK * 3))
                        .for_each(|(pa, gu)| {
                            for (slot, g) in pa.chunks_exact_mut(3).zip(gu.chunks_exact(3)) {
                                let w = geom::mat_apply(&rot, [g[0], g[1], g[2]]);
                                for a in 0..3 {
                                    slot[a] = slot[a] + w[a];
                                }
                            }
                        });
                }
            }
            Op::SoftUnion { x, phi } => {
                let xn = &mut head[x.0];
                if xn.needs_grad {
                    let k = xn.cols;
                    let vals = &xn.val;
                    xn.adj
                        .par_chunks_mut(ROW_CHUNK * k)
                        .zip(vals.par_chunks(ROW_CHUNK * k))
                        .zip(node.val.par_chunks(ROW_CHUNK))
                        .zip(node.adj.par_chunks(ROW_CHUNK))
                        .for_each(|(((ga, xs), us), gus)| {
                            for r in 0..us.len() {
                                let row = &xs[r * k..(r + 1) * k];
                                let u = us[r];
                                let gu = gus[r];
                                let mut m = row[0];
                                for &o in &row[1..] {
                                    m = fmax(m, o);
                                }
                                let mut den = T::zero();
                                for &o in row {
                                    den = den + (phi * (o - m)).exp();
                                }
                                for (j, &o) in row.iter().enumerate() {
                                    let w = (phi * (o - m)).exp() / den;
                                    ga[r * k + j] += gu * w * (T::one() + phi * (o - u));
                                }
                            }
                        });
                }
            }
            Op::MeanSq { x } => {
                let xn = &mut head[x.0];
                if xn.needs_grad {
                    let g = node.adj[0];
                    let scale = T::of(2.0) / T::of(xn.val.len() as f64);
                    let vals = &xn.val;
                    let adj = &mut xn.adj;
                    if adj.len() >= PAR_MIN {
                        adj.par_chunks_mut(ROW_CHUNK)
                            .zip(vals.par_chunks(ROW_CHUNK))
                            .for_each(|(a, v)| {
                                for (ai, vi) in a.iter_mut().zip(v) {
                                    *ai += g * scale * *vi;
                                }
                            });
                    } else {
                        for (ai, vi) in adj.iter_mut().zip(vals) {
                            *ai += g * scale * *vi;
                        }
                    }
                }
            }
        }
    }
}

/// acc += inc, elementwise.
fn axpy<T: Real>(acc: &mut [T], inc: &[T]) {
    debug_assert_eq!(acc.len(), inc.len());
    if acc.len() >= PAR_MIN {
        acc.par_chunks_mut(ROW_CHUNK)
            .zip(inc.par_chunks(ROW_CHUNK))
            .for_each(|(a, b)| {
                for (ai, bi) in a.iter_mut().zip(b) {
                    *ai += *bi;
                }
            });
    } else {
        for (ai, bi) in acc.iter_mut().zip(inc) {
            *ai += *bi;
        }
    }
}

/// acc[i] += f(src[i], g[i]).
fn acc_from_src<T: Real>(acc: &mut [T], src: &[T], g: &[T], f: impl Fn(T, T) -> T + Sync) {
    debug_assert_eq!(acc.len(), src.len());
    debug_assert_eq!(acc.len(), g.len());
    if acc.len() >= PAR_MIN {
        acc.par_chunks_mut(ROW_CHUNK)
            .zip(src.par_chunks(ROW_CHUNK))
            .zip(g.par_chunks(ROW_CHUNK))
            .for_each(|((a, s), gg)| {
                for i in 0..a.len() {
                    a[i] += f(s[i], gg[i]);
                }
            });
    } else {
        for i in 0..acc.len() {
            acc[i] += f(src[i], g[i]);
        }
    }
}

/// Column sums accumulated into `out` (len = cols), chunk partials combined
/// in order.
fn col_sum_into<T: Real>(buf: &[T], cols: usize, out: &mut [T]) {
    debug_assert_eq!(out.len(), cols);
    let partials: Vec<Vec<T>> = buf
        .par_chunks(ROW_CHUNK * cols)
        .map(|chunk| {
            let mut part = vec![T::zero(); cols];
            for row in chunk.chunks_exact(cols) {
                for (p, v) in part.iter_mut().zip(row) {
                    *p = *p + *v;
                }
            }
            part
        })
        .collect();
    for part in partials {
        for (o, p) in out.iter_mut().zip(part) {
            *o += p;
        }
    }
}

fn map_unary<T: Real>(x: &[T], out: &mut [T], f: impl Fn(T) -> T + Sync) {
    if x.len() >= PAR_MIN {
        out.par_chunks_mut(ROW_CHUNK)
            .zip(x.par_chunks(ROW_CHUNK))
            .for_each(|(o, xs)| {
                for (oi, xi) in o.iter_mut().zip(xs) {
                    *oi = f(*xi);
                }
            });
    } else {
        for (oi, xi) in out.iter_mut().zip(x) {
            *oi = f(*xi);
        }
    }
}

fn map_binary<T: Real>(x: &[T], y: &[T], out: &mut [T], f: impl Fn(T, T) -> T + Sync) {
    debug_assert_eq!(x.len(), y.len());
    if x.len() >= PAR_MIN {
        out.par_chunks_mut(ROW_CHUNK)
            .zip(x.par_chunks(ROW_CHUNK))
            .zip(y.par_chunks(ROW_CHUNK))
            .for_each(|((o, xs), ys)| {
                for i in 0..o.len() {
                    o[i] = f(xs[i], ys[i]);
                }
            });
    } else {
        for i in 0..out.len() {
            out[i] = f(x[i], y[i]);
        }
    }
}

// ---------------------------------------------------------------------------
// Builder context
// ---------------------------------------------------------------------------

/// Define-by-run program builder bound to a parameter store.
pub struct Ctx<'a, T: Real> {
    tape: &'a mut Tape<T>,
    params: &'a ParameterStore<T>,
    param_nodes: Vec<Option<VarId>>,
}

impl<'a, T: Real> Ctx<'a, T> {
    /// Leaf bound to a parameter segment (one node per segment).
    pub fn param(&mut self, seg: SegId) -> Result<VarId, TapeError> {
        if let Some(id) = self.param_nodes[seg.0] {
            return Ok(id);
        }
        let s = self.params.layout().seg(seg);
        let id = self.tape.push(Op::Param { seg }, s.rows, s.cols, true);
        let vals = self.params.segment(seg);
        self.tape.nodes[id.0].val.copy_from_slice(vals);
        self.param_nodes[seg.0] = Some(id);
        self.tape.check_finite(id)
    }

    /// Gradient-free leaf holding runtime data.
    pub fn constant(&mut self, rows: usize, cols: usize, data: &[T]) -> Result<VarId, TapeError> {
        assert_eq!(data.len(), rows * cols);
        let id = self.tape.push(Op::Constant, rows, cols, false);
        self.tape.nodes[id.0].val.copy_from_slice(data);
        self.tape.check_finite(id)
    }

    pub fn value(&self, id: VarId) -> &[T] {
        self.tape.value(id)
    }

    pub fn shape(&self, id: VarId) -> (usize, usize) {
        self.tape.shape(id)
    }

    /// y = x·wᵀ (+ b); x: n×k, w: m×k, b: 1×m.
    pub fn affine(&mut self, x: VarId, w: VarId, b: Option<VarId>) -> Result<VarId, TapeError> {
        let (n, k) = self.tape.shape(x);
        let (m, k2) = self.tape.shape(w);
        assert_eq!(k, k2, "affine: input width {k} vs weight width {k2}");
        if let Some(b) = b {
            assert_eq!(self.tape.shape(b), (1, m), "affine: bias shape");
        }
        let grad = self.tape.grad_of(x)
            || self.tape.grad_of(w)
            || b.map(|b| self.tape.grad_of(b)).unwrap_or(false);
        let id = self.tape.push(Op::Affine { x, w, b }, n, m, grad);
        let (head, tail) = self.tape.nodes.split_at_mut(id.0);
        let out = &mut tail[0].val;
        match b {
            Some(b) => {
                let bv = &head[b.0].val;
                for row in out.chunks_exact_mut(m) {
                    row.copy_from_slice(bv);
                }
            }
            None => out.iter_mut().for_each(|v| *v = T::zero()),
        }
        let xv = &head[x.0].val;
        let wv = &head[w.0].val;
        out.par_chunks_mut(ROW_CHUNK * m)
            .zip(xv.par_chunks(ROW_CHUNK * k))
            .for_each(|(yc, xc)| {
                let rows_here = yc.len() / m;
                T::gemm(
                    rows_here,
                    k,
                    m,
                    T::one(),
                    xc,
                    k as isize,
                    1,
                    wv,
                    1,
                    k as isize,
                    yc,
                    m as isize,
                    1,
                );
            });
        self.tape.check_finite(id)
    }

    /// x (n×c) + r (1×c) broadcast over rows.
    pub fn add_row(&mut self, x: VarId, r: VarId) -> Result<VarId, TapeError> {
        let (n, c) = self.tape.shape(x);
        assert_eq!(self.tape.shape(r), (1, c), "add_row: row shape");
        let grad = self.tape.grad_of(x) || self.tape.grad_of(r);
        let id = self.tape.push(Op::AddRow { x, r }, n, c, grad);
        let (head, tail) = self.tape.nodes.split_at_mut(id.0);
        let rv = head[r.0].val.clone();
        let xv = &head[x.0].val;
        let out = &mut tail[0].val;
        if out.len() >= PAR_MIN {
            out.par_chunks_mut(ROW_CHUNK * c)
                .zip(xv.par_chunks(ROW_CHUNK * c))
                .for_each(|(o, xs)| {
                    for (orow, xrow) in o.chunks_exact_mut(c).zip(xs.chunks_exact(c)) {
                        for i in 0..c {
                            orow[i] = xrow[i] + rv[i];
                        }
                    }
                });
        } else {
            for (orow, xrow) in out.chunks_exact_mut(c).zip(xv.chunks_exact(c)) {
                for i in 0..c {
                    orow[i] = xrow[i] + rv[i];
                }
            }
        }
        self.tape.check_finite(id)
    }

    fn unary(&mut self, op: Op<T>, x: VarId, f: impl Fn(T) -> T + Sync) -> Result<VarId, TapeError> {
        let (n, c) = self.tape.shape(x);
        let grad = self.tape.grad_of(x);
        let id = self.tape.push(op, n, c, grad);
        let (head, tail) = self.tape.nodes.split_at_mut(id.0);
        map_unary(&head[x.0].val, &mut tail[0].val, f);
        self.tape.check_finite(id)
    }

    fn binary(
        &mut self,
        op: Op<T>,
        x: VarId,
        y: VarId,
        f: impl Fn(T, T) -> T + Sync,
    ) -> Result<VarId, TapeError> {
        let (n, c) = self.tape.shape(x);
        assert_eq!(self.tape.shape(y), (n, c), "binary op shape mismatch");
        let grad = self.tape.grad_of(x) || self.tape.grad_of(y);
        let id = self.tape.push(op, n, c, grad);
        let (head, tail) = self.tape.nodes.split_at_mut(id.0);
        map_binary(&head[x.0].val, &head[y.0].val, &mut tail[0].val, f);
        self.tape.check_finite(id)
    }

    pub fn softplus(&mut self, x: VarId) -> Result<VarId, TapeError> {
        self.unary(Op::Softplus { x }, x, fieldops::softplus)
    }

    pub fn sigmoid(&mut self, x: VarId) -> Result<VarId, TapeError> {
        self.unary(Op::Sigmoid { x }, x, fieldops::sigmoid)
    }

    pub fn tanh(&mut self, x: VarId) -> Result<VarId, TapeError> {
        self.unary(Op::Tanh { x }, x, |v| v.tanh())
    }

    pub fn abs(&mut self, x: VarId) -> Result<VarId, TapeError> {
        self.unary(Op::Abs { x }, x, |v| v.abs())
    }

    pub fn clamp(&mut self, x: VarId, lo: T, hi: T) -> Result<VarId, TapeError> {
        self.unary(Op::Clamp { x, lo, hi }, x, move |v| fmin(fmax(v, lo), hi))
    }

    pub fn scale(&mut self, x: VarId, c: T) -> Result<VarId, TapeError> {
        self.unary(Op::Scale { x, c }, x, move |v| v * c)
    }

    pub fn offset(&mut self, x: VarId, c: T) -> Result<VarId, TapeError> {
        self.unary(Op::Offset { x }, x, move |v| v + c)
    }

    pub fn add(&mut self, x: VarId, y: VarId) -> Result<VarId, TapeError> {
        self.binary(Op::Add { x, y }, x, y, |a, b| a + b)
    }

    pub fn sub(&mut self, x: VarId, y: VarId) -> Result<VarId, TapeError> {
        self.binary(Op::Sub { x, y }, x, y, |a, b| a - b)
    }

    pub fn max(&mut self, x: VarId, y: VarId) -> Result<VarId, TapeError> {
        self.binary(Op::Max { x, y }, x, y, fmax)
    }

    pub fn min(&mut self, x: VarId, y: VarId) -> Result<VarId, TapeError> {
        self.binary(Op::Min { x, y }, x, y, fmin)
    }

    pub fn max_const(&mut self, x: VarId, c: T) -> Result<VarId, TapeError> {
        self.unary(Op::MaxConst { x, c }, x, move |v| fmax(v, c))
    }

    pub fn min_const(&mut self, x: VarId, c: T) -> Result<VarId, TapeError> {
        self.unary(Op::MinConst { x, c }, x, move |v| fmin(v, c))
    }

    pub fn hypot(&mut self, x: VarId, y: VarId) -> Result<VarId, TapeError> {
        self.binary(Op::Hypot { x, y }, x, y, fieldops::norm2_pair)
    }

    pub fn cols(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId, TapeError> {
        let (n, c) = self.tape.shape(x);
        assert!(start + len <= c, "cols: slice out of range");
        let grad = self.tape.grad_of(x);
        let id = self.tape.push(Op::Cols { x, start, len }, n, len, grad);
        let (head, tail) = self.tape.nodes.split_at_mut(id.0);
        let xv = &head[x.0].val;
        let out = &mut tail[0].val;
        for r in 0..n {
            out[r * len..(r + 1) * len].copy_from_slice(&xv[r * c + start..r * c + start + len]);
        }
        self.tape.check_finite(id)
    }

    pub fn concat_cols(&mut self, xs: &[VarId]) -> Result<VarId, TapeError> {
        assert!(!xs.is_empty());
        let n = self.tape.shape(xs[0]).0;
        let total: usize = xs.iter().map(|&x| self.tape.shape(x).1).sum();
        for &x in xs {
            assert_eq!(self.tape.shape(x).0, n, "concat_cols: row mismatch");
        }
        let grad = xs.iter().any(|&x| self.tape.grad_of(x));
        let id = self
            .tape
            .push(Op::ConcatCols { xs: xs.to_vec() }, n, total, grad);
        let (head, tail) = self.tape.nodes.split_at_mut(id.0);
        let out = &mut tail[0].val;
        let mut at = 0;
        for &x in xs {
            let w = head[x.0].cols;
            let xv = &head[x.0].val;
            for r in 0..n {
                out[r * total + at..r * total + at + w].copy_from_slice(&xv[r * w..(r + 1) * w]);
            }
            at += w;
        }
        self.tape.check_finite(id)
    }

    pub fn gather(&mut self, x: VarId, rows: Arc<Vec<u32>>) -> Result<VarId, TapeError> {
        let (n, c) = self.tape.shape(x);
        assert!(rows.iter().all(|&r| (r as usize) < n), "gather: row range");
        let m = rows.len();
        let grad = self.tape.grad_of(x);
        let id = self.tape.push(
            Op::Gather {
                x,
                rows: rows.clone(),
            },
            m,
            c,
            grad,
        );
        let (head, tail) = self.tape.nodes.split_at_mut(id.0);
        let xv = &head[x.0].val;
        let out = &mut tail[0].val;
        for (r, &src) in rows.iter().enumerate() {
            let s = src as usize;
            out[r * c..(r + 1) * c].copy_from_slice(&xv[s * c..(s + 1) * c]);
        }
        self.tape.check_finite(id)
    }

    /// Rigid inverse transform of every row of `p` into the box frame given
    /// by (raw quaternion q, center c); q is normalized inside the op.
    pub fn inv_transform(&mut self, q: VarId, c: VarId, p: VarId) -> Result<VarId, TapeError> {
        assert_eq!(self.tape.shape(q), (1, 4), "inv_transform: quaternion");
        assert_eq!(self.tape.shape(c), (1, 3), "inv_transform: center");
        let (n, three) = self.tape.shape(p);
        assert_eq!(three, 3, "inv_transform: points are n×3");
        let grad = self.tape.grad_of(q) || self.tape.grad_of(c) || self.tape.grad_of(p);
        let id = self.tape.push(Op::InvTransform { q, c, p }, n, 3, grad);
        let (head, tail) = self.tape.nodes.split_at_mut(id.0);
        let q_raw: [T; 4] = head[q.0].val[..4].try_into().unwrap();
        let qn = geom::quat_normalize(q_raw);
        let rot = geom::quat_to_matrix(qn);
        let cv: [T; 3] = head[c.0].val[..3].try_into().unwrap();
        let pv = &head[p.0].val;
        let out = &mut tail[0].val;
        out.par_chunks_mut(ROW_CHUNK * 3)
            .zip(pv.par_chunks(ROW_CHUNK * 3))
            .for_each(|(o, ps)| {
                for (slot, pt) in o.chunks_exact_mut(3).zip(ps.chunks_exact(3)) {
                    let u = geom::mat_apply_t(&rot, geom::sub3([pt[0], pt[1], pt[2]], cv));
                    slot.copy_from_slice(&u);
                }
            });
        self.tape.check_finite(id)
    }

    /// Row-wise softmax-modulated union over columns (n×N → n×1).
    pub fn soft_union(&mut self, x: VarId, phi: T) -> Result<VarId, TapeError> {
        let (n, k) = self.tape.shape(x);
        assert!(k >= 1);
        let grad = self.tape.grad_of(x);
        let id = self.tape.push(Op::SoftUnion { x, phi }, n, 1, grad);
        let (head, tail) = self.tape.nodes.split_at_mut(id.0);
        let xv = &head[x.0].val;
        let out = &mut tail[0].val;
        out.par_chunks_mut(ROW_CHUNK)
            .zip(xv.par_chunks(ROW_CHUNK * k))
            .for_each(|(o, xs)| {
                for (i, slot) in o.iter_mut().enumerate() {
                    *slot = fieldops::soft_union(&xs[i * k..(i + 1) * k], phi);
                }
            });
        self.tape.check_finite(id)
    }

    /// Mean of squares over every element (scalar output).
    pub fn mean_sq(&mut self, x: VarId) -> Result<VarId, TapeError> {
        let grad = self.tape.grad_of(x);
        let id = self.tape.push(Op::MeanSq { x }, 1, 1, grad);
        let (head, tail) = self.tape.nodes.split_at_mut(id.0);
        let xv = &head[x.0].val;
        let partials: Vec<T> = xv
            .par_chunks(ROW_CHUNK)
            .map(|c| c.iter().fold(T::zero(), |a, v| a + *v * *v))
            .collect();
        let mut sum = T::zero();
        for p in partials {
            sum = sum + p;
        }
        tail[0].val[0] = sum / T::of(xv.len() as f64);
        self.tape.check_finite(id)
    }
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Max relative error between reverse-mode gradients and central finite
/// differences on `samples` randomly chosen coordinates. The relative error
/// denominator is `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<T: Real, F>(
    params: &ParameterStore<T>,
    build: F,
    eps: T,
    samples: usize,
    seed: u64,
) -> Result<T, TapeError>
where
    F: Fn(&mut Ctx<'_, T>) -> Result<VarId, TapeError>,
{
    if eps <= T::zero() {
        return Err(TapeError::Validation("finite-diff eps must be > 0".into()));
    }
    let total = params.layout().total();
    if samples > total {
        return Err(TapeError::Validation(format!(
            "samples {samples} exceeds parameter count {total}"
        )));
    }
    let mut tape = Tape::new();
    let (_, grads) = tape.evaluate(params, true, &build)?;
    let grads = grads.expect("gradients requested");

    // distinct coordinates via partial Fisher-Yates
    let mut idx: Vec<usize> = (0..total).collect();
    let mut r = rng::stream(seed, 0);
    for i in 0..samples {
        let j = i + rng::index(&mut r, total - i);
        idx.swap(i, j);
    }

    let mut work = params.clone();
    let mut max_rel = T::zero();
    let floor = T::of(1e-8);
    for &coord in &idx[..samples] {
        let orig = work.values()[coord];
        work.values_mut()[coord] = orig + eps;
        let (fp, _) = tape.evaluate(&work, false, &build)?;
        work.values_mut()[coord] = orig - eps;
        let (fm, _) = tape.evaluate(&work, false, &build)?;
        work.values_mut()[coord] = orig;
        let numeric = (fp - fm) / (T::of(2.0) * eps);
        let analytic = grads[coord];
        let denom = fmax(fmax(analytic.abs(), numeric.abs()), floor);
        max_rel = fmax(max_rel, (analytic - numeric).abs() / denom);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_seg(n: usize, vals: &[f64]) -> ParameterStore<f64> {
        let mut lb = Layout::builder();
        let seg = lb.add("p", 1, n);
        let layout = lb.build();
        let mut ps = ParameterStore::zeros(layout);
        ps.segment_mut(seg).copy_from_slice(vals);
        ps
    }

    #[test]
    fn sum_of_squares_gradient() {
        let ps = single_seg(2, &[1.0, 2.0]);
        let seg = ps.layout().by_name("p").unwrap();
        let mut tape = Tape::new();
        let (v, g) = tape
            .evaluate(&ps, true, |ctx| {
                let p = ctx.param(seg)?;
                // Σ pᵢ² = 2 · mean of squares for length 2
                let ms = ctx.mean_sq(p)?;
                ctx.scale(ms, 2.0)
            })
            .unwrap();
        assert_eq!(v, 5.0);
        assert_eq!(g.unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn softplus_gradient_at_zero() {
        let ps = single_seg(1, &[0.0]);
        let seg = ps.layout().by_name("p").unwrap();
        let mut tape = Tape::new();
        let (v, g) = tape
            .evaluate(&ps, true, |ctx| {
                let p = ctx.param(seg)?;
                ctx.softplus(p)
            })
            .unwrap();
        assert!((v - (2.0f64).ln()).abs() < 1e-15);
        assert_eq!(g.unwrap()[0], 0.5);
    }

    #[test]
    fn forward_value_identical_with_and_without_gradients() {
        let vals: Vec<f64> = (0..6).map(|i| 0.3 * i as f64 - 0.7).collect();
        let ps = single_seg(6, &vals);
        let seg = ps.layout().by_name("p").unwrap();
        let build = |ctx: &mut Ctx<'_, f64>| {
            let p = ctx.param(seg)?;
            let s = ctx.softplus(p)?;
            let t = ctx.tanh(s)?;
            let a = ctx.abs(t)?;
            let u = ctx.soft_union(a, 25.0)?;
            ctx.mean_sq(u)
        };
        let mut tape = Tape::new();
        let (v1, _) = tape.evaluate(&ps, false, build).unwrap();
        let (v2, g) = tape.evaluate(&ps, true, build).unwrap();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert!(g.is_some());
    }

    #[test]
    fn random_mlp_matches_finite_differences() {
        // 4 affine layers with softplus between, mean-square output
        let mut lb = Layout::builder();
        let w1 = lb.add("w1", 8, 3);
        let b1 = lb.add("b1", 1, 8);
        let w2 = lb.add("w2", 8, 8);
        let b2 = lb.add("b2", 1, 8);
        let w3 = lb.add("w3", 8, 8);
        let b3 = lb.add("b3", 1, 8);
        let w4 = lb.add("w4", 1, 8);
        let b4 = lb.add("b4", 1, 1);
        let layout = lb.build();
        let mut ps: ParameterStore<f64> = ParameterStore::zeros(layout);
        let mut r = rng::stream(42, 0);
        for v in ps.values_mut() {
            *v = rng::uniform(&mut r, -0.7, 0.7);
        }
        let mut pts = vec![0.0f64; 31 * 3];
        for v in pts.iter_mut() {
            *v = rng::uniform(&mut r, -1.0, 1.0);
        }
        let build = move |ctx: &mut Ctx<'_, f64>| {
            let x = ctx.constant(31, 3, &pts)?;
            let (w1, b1) = (ctx.param(w1)?, ctx.param(b1)?);
            let a1 = ctx.affine(x, w1, Some(b1))?;
            let h1 = ctx.softplus(a1)?;
            let (w2, b2) = (ctx.param(w2)?, ctx.param(b2)?);
            let a2 = ctx.affine(h1, w2, Some(b2))?;
            let h2 = ctx.softplus(a2)?;
            let (w3, b3) = (ctx.param(w3)?, ctx.param(b3)?);
            let a3 = ctx.affine(h2, w3, Some(b3))?;
            let h3 = ctx.softplus(a3)?;
            let (w4, b4) = (ctx.param(w4)?, ctx.param(b4)?);
            let a4 = ctx.affine(h3, w4, Some(b4))?;
            ctx.mean_sq(a4)
        };
        let err = finite_diff_check(&ps, build, 1e-5, 60, 7).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn transform_extrude_graph_matches_finite_differences() {
        let mut lb = Layout::builder();
        let q = lb.add("q", 1, 4);
        let c = lb.add("c", 1, 3);
        let h = lb.add("h", 1, 1);
        let w = lb.add("w", 1, 2);
        let layout = lb.build();
        let mut ps: ParameterStore<f64> = ParameterStore::zeros(layout);
        ps.segment_mut(q).copy_from_slice(&[0.9, 0.2, -0.3, 0.1]);
        ps.segment_mut(c).copy_from_slice(&[0.05, -0.1, 0.08]);
        ps.segment_mut(h).copy_from_slice(&[0.3]);
        ps.segment_mut(w).copy_from_slice(&[0.8, -0.6]);
        let mut r = rng::stream(5, 0);
        let mut pts = vec![0.0f64; 40 * 3];
        for v in pts.iter_mut() {
            *v = rng::uniform(&mut r, -0.5, 0.5);
        }
        let build = move |ctx: &mut Ctx<'_, f64>| {
            let p = ctx.constant(40, 3, &pts)?;
            let (q, c, h, w) = (ctx.param(q)?, ctx.param(c)?, ctx.param(h)?, ctx.param(w)?);
            let xt = ctx.inv_transform(q, c, p)?;
            let zt = ctx.cols(xt, 2, 1)?;
            let za = ctx.abs(zt)?;
            let negh = ctx.scale(h, -1.0)?;
            let d = ctx.add_row(za, negh)?;
            // linear stand-in sketch SDF so gradients reach q, c, and w
            let xy = ctx.cols(xt, 0, 2)?;
            let sk = ctx.affine(xy, w, None)?;
            let m1 = ctx.max(sk, d)?;
            let m2 = ctx.min_const(m1, 0.0)?;
            let sp = ctx.max_const(sk, 0.0)?;
            let dp = ctx.max_const(d, 0.0)?;
            let rr = ctx.hypot(sp, dp)?;
            let scyl = ctx.add(m2, rr)?;
            let osc = ctx.scale(scyl, -10.0)?;
            let occ = ctx.sigmoid(osc)?;
            ctx.mean_sq(occ)
        };
        let err = finite_diff_check(&ps, build, 1e-6, 10, 3).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        let vals: Vec<f64> = vec![0.4, -0.2, 0.9, 0.1];
        let ps = single_seg(4, &vals);
        let seg = ps.layout().by_name("p").unwrap();
        let prog_a = |ctx: &mut Ctx<'_, f64>| {
            let p = ctx.param(seg)?;
            let s = ctx.softplus(p)?;
            ctx.mean_sq(s)
        };
        let prog_b = |ctx: &mut Ctx<'_, f64>| {
            let p = ctx.param(seg)?;
            let t = ctx.tanh(p)?;
            ctx.mean_sq(t)
        };
        let mut tape = Tape::new();
        let (_, ga) = tape.evaluate(&ps, true, prog_a).unwrap();
        let (_, gb) = tape.evaluate(&ps, true, prog_b).unwrap();
        let (_, gs) = tape
            .evaluate(&ps, true, |ctx| {
                let a = prog_a(ctx)?;
                let b = prog_b(ctx)?;
                ctx.add(a, b)
            })
            .unwrap();
        let (ga, gb, gs) = (ga.unwrap(), gb.unwrap(), gs.unwrap());
        for i in 0..4 {
            assert!((gs[i] - (ga[i] + gb[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_intermediate_names_the_primitive() {
        let ps = single_seg(1, &[1e308]);
        let seg = ps.layout().by_name("p").unwrap();
        let mut tape = Tape::new();
        let err = tape
            .evaluate(&ps, false, |ctx| {
                let p = ctx.param(seg)?;
                let big = ctx.scale(p, 1e10)?; // overflows to inf
                ctx.mean_sq(big)
            })
            .unwrap_err();
        match err {
            TapeError::NonFinite { op, .. } => assert_eq!(op, "scale"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params_and_decays_moments() {
        let mut ps = single_seg(3, &[0.5, -0.5, 1.0]);
        let before = ps.values().to_vec();
        let mut st: AdamState<f64> = AdamState::new(AdamConfig::default(), 3);
        st.step(&mut ps, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(ps.values(), &before[..]);
        assert_eq!(st.t, 1);
        // decay of pre-loaded moments under zero gradient
        let mut st2: AdamState<f64> = AdamState::new(AdamConfig::default(), 1);
        st2.m[0] = 0.2;
        st2.v[0] = 0.3;
        let mut ps2 = single_seg(1, &[0.0]);
        st2.step(&mut ps2, &[0.0]).unwrap();
        assert!((st2.m[0] - 0.1).abs() < 1e-15);
        assert!((st2.v[0] - 0.297).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_magnitude() {
        let mut ps = single_seg(1, &[0.0]);
        let cfg = AdamConfig {
            lr: 1e-4,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(cfg, 1);
        st.step(&mut ps, &[1.0]).unwrap();
        let expected = 1e-4 / (1.0 + 1e-8);
        assert!((ps.values()[0] + expected).abs() < 1e-18);
    }

    #[test]
    fn adam_two_steps_match_hand_trace() {
        // constant gradient 1, betas (0.5, 0.99), lr 1e-4; hand trace:
        // t=1: m=0.5, v=0.01, m̂=1, v̂=1 → θ₁ = −lr/(1+ε)
        // t=2: m=0.75, v=0.0199, m̂=1, v̂=1 → θ₂ = θ₁ − lr/(1+ε)
        let mut ps = single_seg(1, &[0.0]);
        let cfg: AdamConfig<f64> = AdamConfig {
            lr: 1e-4,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(cfg, 1);
        st.step(&mut ps, &[1.0]).unwrap();
        assert!((st.m[0] - 0.5).abs() < 1e-15);
        assert!((st.v[0] - 0.01).abs() < 1e-15);
        st.step(&mut ps, &[1.0]).unwrap();
        let unit = 1e-4 / (1.0 + 1e-8);
        assert!((st.m[0] - 0.75).abs() < 1e-15);
        assert!((st.v[0] - 0.0199).abs() < 1e-15);
        assert!((ps.values()[0] + 2.0 * unit).abs() < 1e-15);
        assert_eq!(st.t, 2);
    }

    #[test]
    fn adam_layout_mismatch_is_contract_error() {
        let mut ps = single_seg(3, &[0.0; 3]);
        let mut st: AdamState<f64> = AdamState::new(AdamConfig::default(), 2);
        assert!(matches!(
            st.step(&mut ps, &[1.0, 1.0]),
            Err(TapeError::Contract(_))
        ));
    }

    #[test]
    fn finite_diff_on_quadratic_is_exact() {
        let ps = single_seg(5, &[0.1, -0.4, 2.0, 1.5, -0.3]);
        let seg = ps.layout().by_name("p").unwrap();
        let err = finite_diff_check(
            &ps,
            |ctx| {
                let p = ctx.param(seg)?;
                ctx.mean_sq(p)
            },
            1e-5,
            5,
            1,
        )
        .unwrap();
        assert!(err < 1e-9, "quadratic should be near-exact, got {err}");
    }

    #[test]
    fn finite_diff_rejects_bad_eps_and_oversampling() {
        let ps = single_seg(2, &[0.0, 0.0]);
        let seg = ps.layout().by_name("p").unwrap();
        let quad = |ctx: &mut Ctx<'_, f64>| {
            let p = ctx.param(seg)?;
            ctx.mean_sq(p)
        };
        assert!(matches!(
            finite_diff_check(&ps, quad, 0.0, 1, 0),
            Err(TapeError::Validation(_))
        ));
        assert!(matches!(
            finite_diff_check(&ps, quad, 1e-5, 3, 0),
            Err(TapeError::Validation(_))
        ));
    }

    #[test]
    fn gather_and_concat_round_trip() {
        let ps = single_seg(1, &[0.0]);
        let mut tape = Tape::new();
        let (v, _) = tape
            .evaluate(&ps, false, |ctx| {
                let a = ctx.constant(3, 1, &[1.0, 2.0, 3.0])?;
                let b = ctx.constant(3, 1, &[4.0, 5.0, 6.0])?;
                let m = ctx.concat_cols(&[a, b])?;
                let g = ctx.gather(m, Arc::new(vec![2, 0]))?;
                // rows [3,6],[1,4]; mean of squares = (9+36+1+16)/4
                ctx.mean_sq(g)
            })
            .unwrap();
        assert_eq!(v, 15.5);
    }
}
