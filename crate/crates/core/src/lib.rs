//! Positive-incentive point sampling for implicit pose estimation.
//!
//! The crate provides SO(3)-equivariant point convolutions, anisotropic
//! uncertainty losses, learned sampling with straight-through gating and a
//! geometric-stability objective, uncertainty-weighted rigid alignment, a
//! synthetic benchmark generator, and the three-stage training pipeline
//! that ties them together.

pub mod align;
pub mod geom3;
pub mod io;
pub mod nn;
pub mod pips;
pub mod synth;
pub mod train;
pub mod uncertainty;
pub mod vnconv;
pub mod voxel;
pub mod scalar;

pub use scalar::Scalar;

/// Concrete scalar used by the networks and the training pipeline.
pub type Real = f64;

pub type Vec3 = nalgebra::Vector3<Real>;
pub type Mat3 = nalgebra::Matrix3<Real>;
pub type Rotation = geom3::Rotation<Real>;
pub type RigidTransform = geom3::RigidTransform<Real>;
pub type RotationGroup = geom3::RotationGroup<Real>;
