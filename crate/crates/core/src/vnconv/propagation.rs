use rand::Rng;

use crate::geom3::k_nearest;
use crate::nn::{join, Module, Param};
use crate::Vec3;

use super::{VnError, VnFeature, VnLinear, VnRelu, VnReluCache};

/// Distance floor for the inverse-square interpolation weights.
const DIST_FLOOR: f64 = 1e-9;

/// Propagates source features to arbitrary query points by inverse-square
/// distance interpolation over the `k` nearest sources, followed by one
/// equivariant linear layer and a vector-neuron ReLU.
#[derive(Debug, Clone)]
pub struct FeaturePropagation {
    pub k: usize,
    pub linear: VnLinear,
    pub relu: VnRelu,
}

pub struct PropagationCache {
    indices: Vec<Vec<usize>>,
    weights: Vec<Vec<f64>>,
    interp: VnFeature,
    lin_out: VnFeature,
    relu_cache: VnReluCache,
}

impl FeaturePropagation {
    pub fn new(channels: usize, k: usize, rng: &mut impl Rng) -> Self {
        FeaturePropagation {
            k,
            linear: VnLinear::new(channels, channels, rng),
            relu: VnRelu::new(channels, rng),
        }
    }

    /// Interpolation only (no learned layer); exposed for tests.
    pub fn interpolate(
        &self,
        queries: &[Vec3],
        sources: &[Vec3],
        feats: &VnFeature,
    ) -> Result<(VnFeature, Vec<Vec<usize>>, Vec<Vec<f64>>), VnError> {
        if sources.is_empty() {
            return Err(VnError::EmptySources);
        }
        let k = self.k.min(sources.len());
        let mut interp = VnFeature::zeros(queries.len(), feats.channels);
        let mut all_idx = Vec::with_capacity(queries.len());
        let mut all_w = Vec::with_capacity(queries.len());
        for (qi, q) in queries.iter().enumerate() {
            let idx = k_nearest(sources, q, k, None);
            let raw: Vec<f64> = idx
                .iter()
                .map(|&i| {
                    let d = (sources[i] - q).norm().max(DIST_FLOOR);
                    1.0 / (d * d)
                })
                .collect();
            let total: f64 = raw.iter().sum();
            let w: Vec<f64> = raw.iter().map(|r| r / total).collect();
            for c in 0..feats.channels {
                let mut acc = Vec3::zeros();
                for (&i, &wi) in idx.iter().zip(&w) {
                    acc += feats.at(i, c) * wi;
                }
                *interp.at_mut(qi, c) = acc;
            }
            all_idx.push(idx);
            all_w.push(w);
        }
        Ok((interp, all_idx, all_w))
    }

    pub fn forward(
        &self,
        queries: &[Vec3],
        sources: &[Vec3],
        feats: &VnFeature,
    ) -> Result<(VnFeature, PropagationCache), VnError> {
        let (interp, indices, weights) = self.interpolate(queries, sources, feats)?;
        let lin_out = self.linear.forward(&interp);
        let (out, relu_cache) = self.relu.forward(&lin_out);
        Ok((
            out,
            PropagationCache {
                indices,
                weights,
                interp,
                lin_out,
                relu_cache,
            },
        ))
    }

    /// Returns the gradient with respect to the source features.
    pub fn backward(
        &mut self,
        n_sources: usize,
        cache: &PropagationCache,
        grad_out: &VnFeature,
    ) -> VnFeature {
        let g_lin = self.relu.backward(&cache.lin_out, &cache.relu_cache, grad_out);
        let g_interp = self.linear.backward(&cache.interp, &g_lin);
        let mut grad_src = VnFeature::zeros(n_sources, g_interp.channels);
        for qi in 0..g_interp.points {
            for (&i, &wi) in cache.indices[qi].iter().zip(&cache.weights[qi]) {
                for c in 0..g_interp.channels {
                    *grad_src.at_mut(i, c) += g_interp.at(qi, c) * wi;
                }
            }
        }
        grad_src
    }
}

impl Module for FeaturePropagation {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.linear.visit_params(&join(prefix, "linear"), f);
        self.relu.visit_params(&join(prefix, "relu"), f);
    }
}
