use nalgebra::{Matrix3, Quaternion, Unit, UnitQuaternion, Vector3};

use crate::scalar::Scalar;

/// Skew-symmetric matrix of `v`, so that `skew(v) * w == v.cross(&w)`.
pub fn skew<R: Scalar>(v: &Vector3<R>) -> Matrix3<R> {
    let z = R::zero();
    Matrix3::new(z, -v.z, v.y, v.z, z, -v.x, -v.y, v.x, z)
}

/// A 3D rotation stored as a unit quaternion with `w >= 0`.
///
/// The sign canonicalization makes equality comparisons stable across the
/// quaternion double cover.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation<R: Scalar> {
    q: UnitQuaternion<R>,
}

impl<R: Scalar> Rotation<R> {
    pub fn identity() -> Self {
        Self {
            q: UnitQuaternion::identity(),
        }
    }

    /// Build from quaternion components (w, x, y, z); renormalizes and
    /// canonicalizes the sign.
    pub fn from_wxyz(w: R, x: R, y: R, z: R) -> Self {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z));
        Self::from_unit_quaternion(q)
    }

    pub fn from_unit_quaternion(q: UnitQuaternion<R>) -> Self {
        let q = if q.w < R::zero() {
            UnitQuaternion::new_unchecked(-q.into_inner())
        } else {
            q
        };
        Self { q }
    }

    pub fn from_axis_angle(axis: &Vector3<R>, angle: R) -> Self {
        let axis = Unit::new_normalize(*axis);
        Self::from_unit_quaternion(UnitQuaternion::from_axis_angle(&axis, angle))
    }

    pub fn from_matrix(m: &Matrix3<R>) -> Self {
        let r = nalgebra::Rotation3::from_matrix(m);
        Self::from_unit_quaternion(UnitQuaternion::from_rotation_matrix(&r))
    }

    /// Rotation vector (axis * angle) exponential map.
    pub fn from_rotation_vector(v: &Vector3<R>) -> Self {
        let angle = v.norm();
        if angle < R::c(1e-300) {
            return Self::identity();
        }
        Self::from_axis_angle(v, angle)
    }

    pub fn as_quaternion_wxyz(&self) -> [R; 4] {
        let q = self.q.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn as_matrix(&self) -> Matrix3<R> {
        self.q.to_rotation_matrix().into_inner()
    }

    pub fn rotate(&self, v: &Vector3<R>) -> Vector3<R> {
        self.q * v
    }

    pub fn compose(&self, other: &Self) -> Self {
        Self::from_unit_quaternion(self.q * other.q)
    }

    pub fn inverse(&self) -> Self {
        Self::from_unit_quaternion(self.q.inverse())
    }

    /// Rotation angle in [0, pi].
    pub fn angle(&self) -> R {
        self.q.angle()
    }

    /// Unit rotation axis, canonicalized so the first component larger than
    /// 1e-9 in magnitude is positive. Zero rotation reports +x.
    pub fn axis(&self) -> Vector3<R> {
        match self.q.axis() {
            Some(a) => {
                let a = a.into_inner();
                let tol = R::c(1e-9);
                for i in 0..3 {
                    if a[i] > tol {
                        return a;
                    }
                    if a[i] < -tol {
                        return -a;
                    }
                }
                a
            }
            None => Vector3::x(),
        }
    }

    /// Geodesic distance to `other` in radians.
    pub fn angle_to(&self, other: &Self) -> R {
        self.q.angle_to(&other.q)
    }

    pub fn rotation_vector(&self) -> Vector3<R> {
        self.q.scaled_axis()
    }
}
