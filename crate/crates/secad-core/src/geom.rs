//! Small 3-vector and quaternion helpers shared by the model, the autodiff
//! ops, and extraction. Both the tape forward pass and the plain decode path
//! call the same kernels here, so the two stay bit-identical.

use crate::scalar::Real;

pub type Vec3<T> = [T; 3];
/// Quaternion stored as (w, x, y, z).
pub type Quat<T> = [T; 4];

#[inline]
pub fn sub3<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add3<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn dot3<T: Real>(a: Vec3<T>, b: Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross3<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm3<T: Real>(a: Vec3<T>) -> T {
    dot3(a, a).sqrt()
}

#[inline]
pub fn scale3<T: Real>(a: Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Normalize a quaternion with the norm floored at 1e-8.
#[inline]
pub fn quat_normalize<T: Real>(q: Quat<T>) -> Quat<T> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let n = crate::scalar::fmax(n, T::of(1e-8));
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Rotation matrix (row-major) of a unit quaternion (w, x, y, z).
#[inline]
pub fn quat_to_matrix<T: Real>(q: Quat<T>) -> [[T; 3]; 3] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let two = T::of(2.0);
    let one = T::one();
    [
        [
            one - two * (y * y + z * z),
            two * (x * y - w * z),
            two * (x * z + w * y),
        ],
        [
            two * (x * y + w * z),
            one - two * (x * x + z * z),
            two * (y * z - w * x),
        ],
        [
            two * (x * z - w * y),
            two * (y * z + w * x),
            one - two * (x * x + y * y),
        ],
    ]
}

/// Apply a rotation matrix: `R · v`.
#[inline]
pub fn mat_apply<T: Real>(r: &[[T; 3]; 3], v: Vec3<T>) -> Vec3<T> {
    [dot3(r[0], v), dot3(r[1], v), dot3(r[2], v)]
}

/// Apply the transpose (inverse rotation): `Rᵀ · v`.
#[inline]
pub fn mat_apply_t<T: Real>(r: &[[T; 3]; 3], v: Vec3<T>) -> Vec3<T> {
    [
        r[0][0] * v[0] + r[1][0] * v[1] + r[2][0] * v[2],
        r[0][1] * v[0] + r[1][1] * v[1] + r[2][1] * v[2],
        r[0][2] * v[0] + r[1][2] * v[1] + r[2][2] * v[2],
    ]
}

/// Rotate a vector by a unit quaternion.
#[inline]
pub fn quat_rotate<T: Real>(q: Quat<T>, v: Vec3<T>) -> Vec3<T> {
    mat_apply(&quat_to_matrix(q), v)
}

/// Rotate a vector by the inverse of a unit quaternion.
#[inline]
pub fn quat_rotate_inv<T: Real>(q: Quat<T>, v: Vec3<T>) -> Vec3<T> {
    mat_apply_t(&quat_to_matrix(q), v)
}

/// Partial derivatives of the rotation matrix w.r.t. each unit-quaternion
/// component, `dR/dq_k` for k = w, x, y, z.
pub fn quat_matrix_jacobian<T: Real>(q: Quat<T>) -> [[[T; 3]; 3]; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let two = T::of(2.0);
    let zero = T::zero();
    let m = |a: T| two * a;
    [
        // dR/dw
        [
            [zero, -m(z), m(y)],
            [m(z), zero, -m(x)],
            [-m(y), m(x), zero],
        ],
        // dR/dx
        [
            [zero, m(y), m(z)],
            [m(y), -m(x) - m(x), -m(w)],
            [m(z), m(w), -m(x) - m(x)],
        ],
        // dR/dy
        [
            [-m(y) - m(y), m(x), m(w)],
            [m(x), zero, m(z)],
            [-m(w), m(z), -m(y) - m(y)],
        ],
        // dR/dz
        [
            [-m(z) - m(z), -m(w), m(x)],
            [m(w), -m(z) - m(z), m(y)],
            [m(x), m(y), zero],
        ],
    ]
}
