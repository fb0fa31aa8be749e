use crate::geom3::k_nearest;
use crate::Vec3;

use super::VnError;

/// Per-point vector-neuron features: `channels` 3-vectors per point.
///
/// Rotating the input cloud rotates every channel vector by the same
/// rotation.
#[derive(Debug, Clone)]
pub struct VnFeature {
    pub points: usize,
    pub channels: usize,
    data: Vec<Vec3>,
}

impl VnFeature {
    pub fn zeros(points: usize, channels: usize) -> Self {
        VnFeature {
            points,
            channels,
            data: vec![Vec3::zeros(); points * channels],
        }
    }

    #[inline]
    pub fn at(&self, point: usize, channel: usize) -> &Vec3 {
        &self.data[point * self.channels + channel]
    }

    #[inline]
    pub fn at_mut(&mut self, point: usize, channel: usize) -> &mut Vec3 {
        &mut self.data[point * self.channels + channel]
    }

    /// All channel vectors of one point.
    pub fn point(&self, point: usize) -> &[Vec3] {
        &self.data[point * self.channels..(point + 1) * self.channels]
    }

    pub fn rotated(&self, r: &crate::Mat3) -> Self {
        VnFeature {
            points: self.points,
            channels: self.channels,
            data: self.data.iter().map(|v| r * v).collect(),
        }
    }

    /// Copy the selected points into a new feature block.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut out = VnFeature::zeros(indices.len(), self.channels);
        for (dst, &src) in indices.iter().enumerate() {
            for c in 0..self.channels {
                *out.at_mut(dst, c) = *self.at(src, c);
            }
        }
        out
    }

    /// Scatter gradient rows of a selection back to the full-size block.
    pub fn scatter_add(&mut self, indices: &[usize], grads: &VnFeature) {
        for (src, &dst) in indices.iter().enumerate() {
            for c in 0..self.channels {
                *self.at_mut(dst, c) += *grads.at(src, c);
            }
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt()
    }
}

/// Layer-0 features: channel `j` of point `n` is the relative direction to
/// its `j`-th nearest neighbor. Exactly equivariant by construction.
pub fn init_point_features(positions: &[Vec3], k: usize) -> Result<VnFeature, VnError> {
    let n = positions.len();
    if k >= n {
        return Err(VnError::TooFewPoints { k, n });
    }
    let spread = positions
        .iter()
        .map(|p| (p - positions[0]).norm())
        .fold(0.0, f64::max);
    if spread < 1e-12 {
        return Err(VnError::DegenerateCloud);
    }
    let mut feats = VnFeature::zeros(n, k);
    for i in 0..n {
        let nn = k_nearest(positions, &positions[i], k, Some(i));
        for (j, &m) in nn.iter().enumerate() {
            *feats.at_mut(i, j) = positions[m] - positions[i];
        }
    }
    Ok(feats)
}
