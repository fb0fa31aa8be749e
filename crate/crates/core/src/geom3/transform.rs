use nalgebra::Vector3;

use super::Rotation;
use crate::scalar::Scalar;

/// Similarity transform `x -> scale * R x + t`; `scale == 1` for pure rigid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform<R: Scalar> {
    pub rotation: Rotation<R>,
    pub translation: Vector3<R>,
    pub scale: R,
}

impl<R: Scalar> RigidTransform<R> {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation::identity(),
            translation: Vector3::zeros(),
            scale: R::one(),
        }
    }

    pub fn new(rotation: Rotation<R>, translation: Vector3<R>, scale: R) -> Self {
        Self {
            rotation,
            translation,
            scale,
        }
    }

    pub fn apply(&self, p: &Vector3<R>) -> Vector3<R> {
        self.rotation.rotate(p) * self.scale + self.translation
    }

    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.rotate(&other.translation) * self.scale + self.translation,
            scale: self.scale * other.scale,
        }
    }

    pub fn inverse(&self) -> Self {
        let inv_rot = self.rotation.inverse();
        let inv_scale = R::one() / self.scale;
        Self {
            rotation: inv_rot,
            translation: inv_rot.rotate(&-self.translation) * inv_scale,
            scale: inv_scale,
        }
    }
}
