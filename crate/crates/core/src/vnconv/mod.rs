//! Vector-neuron features and the SO(3)-equivariant 3D graph convolution
//! backbone: equivariant convolution layers, feature propagation to query
//! points, invariant readout, and the canonical-coordinate head.

mod backbone;
mod feature;
mod gconv;
mod net;
mod propagation;
mod rf;
mod vn_ops;

pub use backbone::{Backbone, BackboneCache, BackboneConfig};
pub use feature::{init_point_features, VnFeature};
pub use gconv::{sim, theta, ConvKernel, GConvCache, GConvLayer, LIFT_DIR};
pub use net::{query_readout, query_readout_backward, ImplicitNet, ImplicitNetCache, NetConfig, UncertaintyOut};
pub use propagation::{FeaturePropagation, PropagationCache};
pub use rf::ReceptiveField;
pub use vn_ops::{vn_invariant_readout, vn_readout_backward, VnLinear, VnRelu, VnReluCache};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VnError {
    #[error("degenerate point cloud: all points coincide")]
    DegenerateCloud,
    #[error("channel count mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("feature width mismatch: expected {expected}, got {got}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("neighbor count {k} must be below point count {n}")]
    TooFewPoints { k: usize, n: usize },
    #[error("empty source point set")]
    EmptySources,
    #[error("zero-length direction or support vector")]
    ZeroDirection,
}
