//! Closed-form field operators: extrusion SDF, sigmoid occupancy, softmax
//! union, and the hard variants used at extraction time.
//!
//! These scalar kernels are the single source of truth for the math — the
//! autodiff ops in [`crate::tape`] call them for their forward values, so a
//! gradient-free pass and a gradient pass agree to the last bit.

use crate::scalar::{fmax, fmin, Real};
use serde::{Deserialize, Serialize};

/// Sharpness of the SDF→occupancy conversion (η) and the union modulation
/// coefficient (φ).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, bound = "")]
pub struct FieldParams<T: Real> {
    pub eta: T,
    pub phi: T,
}

impl<T: Real> Default for FieldParams<T> {
    fn default() -> Self {
        Self {
            eta: T::of(150.0),
            phi: T::of(25.0),
        }
    }
}

/// Numerically stable logistic sigmoid; exponent is never positive.
#[inline]
pub fn sigmoid<T: Real>(t: T) -> T {
    if t >= T::zero() {
        T::one() / (T::one() + (-t).exp())
    } else {
        let e = t.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable softplus `ln(1 + eˣ)`.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Euclidean norm of two values, written the same way in every caller.
#[inline]
pub fn norm2_pair<T: Real>(a: T, b: T) -> T {
    (a * a + b * b).sqrt()
}

#[inline]
pub fn clamp_unit<T: Real>(x: T) -> T {
    fmin(fmax(x, -T::one()), T::one())
}

/// Cylinder SDF from a sketch SDF and a signed height excess `d = |z| − h`,
/// combined form: `min(max(s, d), 0) + ‖(max(s,0), max(d,0))‖₂`.
#[inline]
pub fn extrude_combined<T: Real>(s_sk: T, d: T) -> T {
    fmin(fmax(s_sk, d), T::zero()) + norm2_pair(fmax(s_sk, T::zero()), fmax(d, T::zero()))
}

/// Cylinder SDF for a point at signed height `z_local` in the box frame.
#[inline]
pub fn extrude_sdf<T: Real>(s_sk: T, z_local: T, h: T) -> T {
    extrude_combined(s_sk, z_local.abs() - h)
}

/// Literal four-case form of the extrusion SDF. Exists as an independent
/// oracle for `extrude_sdf`; not used in training.
pub fn extrude_sdf_piecewise<T: Real>(s_sk: T, z_local: T, h: T) -> T {
    let dz = z_local.abs() - h;
    let inside_sketch = s_sk <= T::zero();
    let inside_slab = z_local.abs() <= h;
    match (inside_sketch, inside_slab) {
        (true, true) => fmax(s_sk, dz),
        (true, false) => dz,
        (false, true) => s_sk,
        (false, false) => (s_sk * s_sk + dz * dz).sqrt(),
    }
}

/// Sigmoid occupancy of an SDF value: `σ(−η·s)`, in (0, 1), decreasing in s.
#[inline]
pub fn occupancy_from_sdf<T: Real>(s: T, eta: T) -> T {
    sigmoid(-eta * s)
}

/// Softmax-modulated union of per-cylinder occupancies:
/// `Σᵢ softmax(φ·occ)ᵢ · occᵢ`, computed with max-subtraction.
pub fn soft_union<T: Real>(occs: &[T], phi: T) -> T {
    debug_assert!(!occs.is_empty());
    let mut m = occs[0];
    for &o in &occs[1..] {
        m = fmax(m, o);
    }
    let mut num = T::zero();
    let mut den = T::zero();
    for &o in occs {
        let e = (phi * (o - m)).exp();
        num = num + e * o;
        den = den + e;
    }
    num / den
}

/// Exact union of SDFs: the pointwise minimum.
pub fn hard_union_sdf<T: Real>(sdfs: &[T]) -> T {
    debug_assert!(!sdfs.is_empty());
    let mut m = sdfs[0];
    for &s in &sdfs[1..] {
        m = fmin(m, s);
    }
    m
}
