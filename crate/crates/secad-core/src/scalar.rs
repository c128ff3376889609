//! Generic floating-point scalar for the numeric core.

use std::fmt::{Debug, Display};
use std::str::FromStr;

/// Floating-point scalar the core math is generic over.
///
/// `f32` and `f64` implement it. The `gemm` hook has a portable fallback
/// and dispatches to `matrixmultiply` for the two concrete float types.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssignOps
    + Debug
    + Display
    + FromStr
    + Default
    + serde::Serialize
    + serde::de::DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough conversion from an `f64` literal (used for defaults
    /// and closed-form constants).
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable in scalar type")
    }

    /// Shortest round-trip decimal representation; parsing it back with
    /// `from_decimal` recovers the exact same bits.
    fn to_decimal(self) -> String {
        format!("{self:?}")
    }

    fn from_decimal(s: &str) -> Option<Self> {
        s.parse().ok()
    }

    /// `c[m×n] += alpha · a[m×k] · b[k×n]` on row-major buffers with explicit
    /// strides (in elements). Strides may describe transposed views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        gemm_fallback(m, k, n, alpha, a, rsa, csa, b, rsb, csb, c, rsc, csc);
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm_fallback<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    rsa: isize,
    csa: isize,
    b: &[T],
    rsb: isize,
    csb: isize,
    c: &mut [T],
    rsc: isize,
    csc: isize,
) {
    let at = |i: usize, j: usize| a[(i as isize * rsa + j as isize * csa) as usize];
    let bt = |i: usize, j: usize| b[(i as isize * rsb + j as isize * csb) as usize];
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::zero();
            for p in 0..k {
                acc = acc + at(i, p) * bt(p, j);
            }
            let idx = (i as isize * rsc + j as isize * csc) as usize;
            c[idx] = c[idx] + alpha * acc;
        }
    }
}

impl Real for f32 {
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                1.0,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

impl Real for f64 {
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                1.0,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

/// `max` with ties and gradient routing to the first argument.
#[inline]
pub fn fmax<T: Real>(a: T, b: T) -> T {
    if b > a {
        b
    } else {
        a
    }
}

/// `min` with ties and gradient routing to the first argument.
#[inline]
pub fn fmin<T: Real>(a: T, b: T) -> T {
    if b < a {
        b
    } else {
        a
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_fallback() {
        // 2x3 · 3x2
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0f64; 4];
        let mut c_ref = [0.0f64; 4];
        f64::gemm(2, 3, 2, 1.0, &a, 3, 1, &b, 2, 1, &mut c, 2, 1);
        gemm_fallback(2, 3, 2, 1.0, &a, 3, 1, &b, 2, 1, &mut c_ref, 2, 1);
        for (x, y) in c.iter().zip(&c_ref) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
        assert_eq!(c[0], 58.0);
        assert_eq!(c[3], 154.0);
    }

    #[test]
    fn gemm_transposed_view() {
        // c = aᵀ·a for a 2x2; pass a with swapped strides as the left factor.
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, 1.0, &a, 1, 2, &a, 2, 1, &mut c, 2, 1);
        assert_eq!(c, [10.0, 14.0, 14.0, 20.0]);
    }

    #[test]
    fn decimal_round_trip() {
        for v in [0.1f64, -1.0 / 3.0, 1e-300, std::f64::consts::PI] {
            let s = v.to_decimal();
            assert_eq!(f64::from_decimal(&s), Some(v));
        }
    }

    #[test]
    fn tie_breaking_min_max() {
        assert_eq!(fmax(1.0, 1.0), 1.0);
        assert_eq!(fmax(1.0, 2.0), 2.0);
        assert_eq!(fmin(-0.5, 0.0), -0.5);
    }
}
