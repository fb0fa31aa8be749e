//! Rotations, rigid transforms, the icosahedral rotation group, and the
//! small dense linear-algebra kernels the rest of the crate consumes.

mod eig;
mod fps;
mod group;
mod knn;
mod rotation;
mod svd;
mod transform;

pub use eig::eigh_sym;
pub use fps::farthest_point_sampling;
pub use group::{icosahedral_group, RotationGroup};
pub use knn::k_nearest;
pub use rotation::{skew, Rotation};
pub use svd::svd3;
pub use transform::RigidTransform;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Geom3Error {
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("singular value decomposition failed")]
    SvdFailed,
    #[error("requested {requested} samples from a cloud of {available} points")]
    TooManySamples { requested: usize, available: usize },
    #[error("empty point set")]
    EmptyPointSet,
    #[error("rotation group closure failed: product has no member within tolerance")]
    GroupClosure,
}
