//! Rotation algebra shared by the whole pipeline: skew matrices, Rodrigues
//! exponentiation from (cos, sin) pairs, and the continuous 6D rotation
//! representation (first two matrix columns, recovered via Gram-Schmidt).
//!
//! Angles are passed as (cos, sin) pairs rather than radians throughout,
//! which keeps compositions free of 2π wraparound.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// 3-vector of doubles; direction or position depending on context.
pub type Vec3 = Vector3<f64>;

/// 3×3 rotation matrix. Constructors in this module guarantee
/// orthonormality and det = +1 within [`ROTATION_TOL`].
pub type RotMat = Matrix3<f64>;

/// 6D rotation representation: the first two columns of a rotation matrix,
/// column-major `[r00, r10, r20, r01, r11, r21]`.
pub type Rot6d = [f64; 6];

/// Degeneracy tolerance for near-zero vectors, √(machine epsilon) scale.
pub const DEGENERACY_TOL: f64 = 1e-8;

/// Orthonormality / determinant tolerance for rotation matrix checks.
pub const ROTATION_TOL: f64 = 1e-9;

/// Tolerance on cos²+sin² = 1 for angle pairs.
pub const ANGLE_PAIR_TOL: f64 = 1e-6;

/// Skew-symmetric matrix `[v]×` such that `[v]× w = v × w`.
pub fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -v.z, v.y, //
        v.z, 0.0, -v.x, //
        -v.y, v.x, 0.0,
    )
}

/// Inverse of [`skew`] on antisymmetric matrices: `vee(skew(v)) = v`.
pub fn vee(m: &Matrix3<f64>) -> Vec3 {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rodrigues rotation about a unit `axis` by the angle whose cosine and
/// sine are given: `R = I + sin·[n]× + (1−cos)·[n]×²`.
///
/// Errors if the axis is not unit length (within [`DEGENERACY_TOL`]) or the
/// angle pair is far from the unit circle.
pub fn rodrigues(axis: &Vec3, cos_a: f64, sin_a: f64) -> Result<RotMat> {
    let n = axis.norm();
    if (n - 1.0).abs() > DEGENERACY_TOL {
        return Err(Error::Precondition(format!(
            "rodrigues axis must be unit length, got |axis| = {n}"
        )));
    }
    let circle = cos_a * cos_a + sin_a * sin_a;
    if (circle - 1.0).abs() > ANGLE_PAIR_TOL {
        return Err(Error::Precondition(format!(
            "rodrigues (cos, sin) must lie on the unit circle, got cos²+sin² = {circle}"
        )));
    }
    let k = skew(axis);
    Ok(Matrix3::identity() + k * sin_a + k * k * (1.0 - cos_a))
}

/// Recover a rotation matrix from its 6D representation by Gram-Schmidt:
/// `c1 = normalize(a1)`, `c2 = normalize(a2 − (c1·a2) c1)`, `c3 = c1 × c2`.
///
/// Any non-degenerate 6-vector maps to a valid rotation; zero or parallel
/// column vectors are rejected.
pub fn rot6d_to_matrix(r: &Rot6d) -> Result<RotMat> {
    let a1 = Vector3::new(r[0], r[1], r[2]);
    let a2 = Vector3::new(r[3], r[4], r[5]);
    let n1 = a1.norm();
    if n1 < DEGENERACY_TOL {
        return Err(Error::DegenerateRotation(
            "first 6D column is (near) zero".into(),
        ));
    }
    let c1 = a1 / n1;
    let resid = a2 - c1 * c1.dot(&a2);
    let n2 = resid.norm();
    if n2 < DEGENERACY_TOL {
        return Err(Error::DegenerateRotation(
            "second 6D column is (near) parallel to the first".into(),
        ));
    }
    let c2 = resid / n2;
    let c3 = c1.cross(&c2);
    Ok(Matrix3::from_columns(&[c1, c2, c3]))
}

/// First two columns of `r`, column-major. Exact inverse of
/// [`rot6d_to_matrix`] on valid rotations (no renormalization happens).
pub fn matrix_to_rot6d(r: &RotMat) -> Rot6d {
    [
        r[(0, 0)],
        r[(1, 0)],
        r[(2, 0)],
        r[(0, 1)],
        r[(1, 1)],
        r[(2, 1)],
    ]
}

/// 6D encoding of the identity rotation.
pub const ROT6D_IDENTITY: Rot6d = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

/// Max-abs-element check of `RᵀR = I` and `det R = 1` within `tol`.
pub fn is_valid_rotation(r: &RotMat, tol: f64) -> bool {
    let gram = r.transpose() * r - Matrix3::identity();
    let ortho = gram.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    ortho < tol && (r.determinant() - 1.0).abs() < tol
}

/// Max absolute element-wise difference between two 3×3 matrices.
pub fn max_abs_diff(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()))
}
