use rand::Rng;

use crate::geom3::farthest_point_sampling;
use crate::nn::{join, Module, Param};
use crate::{RotationGroup, Vec3};

use super::{
    init_point_features, GConvCache, GConvLayer, ReceptiveField, VnError, VnFeature, VnRelu,
    VnReluCache,
};

/// Backbone hyperparameters. Defaults: 5 conv layers with widths
/// (8, 16, 16, 32, 32), 13 supports, receptive field 10, downsampling to
/// 1/4 after the second layer and 1/16 after the fourth.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    /// Layer-0 channel count: k nearest-neighbor direction features.
    pub k_init: usize,
    pub receptive_field: usize,
    pub n_supports: usize,
    pub widths: Vec<usize>,
    /// (layer index, divisor of the input point count) applied after that
    /// layer's activation.
    pub downsample: Vec<(usize, usize)>,
    pub support_radius: f64,
    pub center_rotate: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            k_init: 8,
            receptive_field: 10,
            n_supports: 13,
            widths: vec![8, 16, 16, 32, 32],
            downsample: vec![(1, 4), (3, 16)],
            support_radius: 0.2,
            center_rotate: true,
        }
    }
}

/// Stack of equivariant convolution layers with FPS downsampling.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub layers: Vec<(GConvLayer, VnRelu)>,
}

pub struct BackboneCache {
    pub rfs: Vec<ReceptiveField>,
    pub inputs: Vec<VnFeature>,
    pub gconv_caches: Vec<GConvCache>,
    pub gconv_out: Vec<VnFeature>,
    pub relu_caches: Vec<VnReluCache>,
    pub ds_indices: Vec<Option<Vec<usize>>>,
    pub final_positions: Vec<Vec3>,
}

impl Backbone {
    pub fn new(config: BackboneConfig, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::new();
        let mut c_in = config.k_init;
        for &c_out in &config.widths {
            layers.push((
                GConvLayer::new(
                    c_in,
                    c_out,
                    config.n_supports,
                    config.support_radius,
                    config.center_rotate,
                    rng,
                ),
                VnRelu::new(c_out, rng),
            ));
            c_in = c_out;
        }
        Backbone { config, layers }
    }

    pub fn out_channels(&self) -> usize {
        *self.config.widths.last().unwrap()
    }

    pub fn forward(
        &self,
        positions: &[Vec3],
        group: &RotationGroup,
    ) -> Result<(VnFeature, BackboneCache), VnError> {
        let n0 = positions.len();
        let mut feats = init_point_features(positions, self.config.k_init)?;
        let mut pos = positions.to_vec();
        let mut cache = BackboneCache {
            rfs: Vec::new(),
            inputs: Vec::new(),
            gconv_caches: Vec::new(),
            gconv_out: Vec::new(),
            relu_caches: Vec::new(),
            ds_indices: Vec::new(),
            final_positions: Vec::new(),
        };
        for (i, (conv, relu)) in self.layers.iter().enumerate() {
            let rf = ReceptiveField::build(&pos, self.config.receptive_field);
            let (pre, gcache) = conv.forward(&feats, &rf, group)?;
            let (post, rcache) = relu.forward(&pre);
            cache.rfs.push(rf);
            cache.inputs.push(feats);
            cache.gconv_caches.push(gcache);
            cache.gconv_out.push(pre);
            cache.relu_caches.push(rcache);
            let ds = self
                .config
                .downsample
                .iter()
                .find(|(layer, _)| *layer == i)
                .map(|&(_, div)| (n0 / div).max(4).min(pos.len()));
            if let Some(target) = ds {
                let idx = farthest_point_sampling(&pos, target)
                    .expect("target bounded by point count");
                pos = idx.iter().map(|&j| pos[j]).collect();
                feats = post.select(&idx);
                cache.ds_indices.push(Some(idx));
            } else {
                feats = post;
                cache.ds_indices.push(None);
            }
        }
        cache.final_positions = pos;
        Ok((feats, cache))
    }

    /// Accumulates parameter gradients from the gradient of the final
    /// feature block.
    pub fn backward(
        &mut self,
        group: &RotationGroup,
        cache: &BackboneCache,
        grad_final: &VnFeature,
    ) {
        let mut grad = grad_final.clone();
        for i in (0..self.layers.len()).rev() {
            if let Some(idx) = &cache.ds_indices[i] {
                let mut full =
                    VnFeature::zeros(cache.gconv_out[i].points, cache.gconv_out[i].channels);
                full.scatter_add(idx, &grad);
                grad = full;
            }
            let (conv, relu) = &mut self.layers[i];
            let g_pre = relu.backward(&cache.gconv_out[i], &cache.relu_caches[i], &grad);
            grad = conv.backward(&cache.inputs[i], &cache.rfs[i], group, &cache.gconv_caches[i], &g_pre);
        }
    }
}

impl Module for Backbone {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, (conv, relu)) in self.layers.iter_mut().enumerate() {
            conv.visit_params(&join(prefix, &format!("conv{i}")), f);
            relu.visit_params(&join(prefix, &format!("relu{i}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom3::icosahedral_group;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn small_config() -> BackboneConfig {
        BackboneConfig {
            k_init: 3,
            receptive_field: 4,
            n_supports: 6,
            widths: vec![4, 4],
            downsample: vec![(0, 2)],
            support_radius: 0.4,
            center_rotate: true,
        }
    }

    #[test]
    fn forward_shapes_and_downsampling() {
        let mut rng = StdRng::seed_from_u64(1);
        let pts: Vec<Vec3> = (0..16)
            .map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen()))
            .collect();
        let bb = Backbone::new(small_config(), &mut rng);
        let group = icosahedral_group();
        let (feats, cache) = bb.forward(&pts, &group).unwrap();
        assert_eq!(feats.points, 8);
        assert_eq!(feats.channels, 4);
        assert_eq!(cache.final_positions.len(), 8);
    }

    #[test]
    fn equivariant_under_group_rotation() {
        let mut rng = StdRng::seed_from_u64(2);
        let pts: Vec<Vec3> = (0..16)
            .map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen()))
            .collect();
        let bb = Backbone::new(small_config(), &mut rng);
        let group = icosahedral_group();
        let (feats, _) = bb.forward(&pts, &group).unwrap();
        for q in (0..group.len()).step_by(11) {
            let r = group.elements[q].as_matrix();
            let rpts: Vec<Vec3> = pts.iter().map(|p| r * p).collect();
            let (rfeats, _) = bb.forward(&rpts, &group).unwrap();
            let expect = feats.rotated(&r);
            let rel = rfeats.max_abs_diff(&expect) / feats.norm().max(1e-12);
            assert!(rel < 1e-6, "q={q} rel={rel}");
        }
    }

    #[test]
    fn backward_param_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(3);
        let pts: Vec<Vec3> = (0..10)
            .map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen()))
            .collect();
        let mut bb = Backbone::new(
            BackboneConfig {
                k_init: 2,
                receptive_field: 3,
                n_supports: 4,
                widths: vec![3, 3],
                downsample: vec![],
                support_radius: 0.4,
                center_rotate: true,
            },
            &mut rng,
        );
        let group = icosahedral_group();
        let w: Vec<f64> = (0..pts.len() * 3 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss_of = |bb: &Backbone| -> f64 {
            let (f, _) = bb.forward(&pts, &group).unwrap();
            let mut l = 0.0;
            for p in 0..f.points {
                for c in 0..f.channels {
                    for i in 0..3 {
                        l += f.at(p, c)[i] * w[(p * 3 + c) * 3 + i];
                    }
                }
            }
            l
        };
        bb.zero_grad();
        let (f, cache) = bb.forward(&pts, &group).unwrap();
        let mut g = VnFeature::zeros(f.points, f.channels);
        for p in 0..f.points {
            for c in 0..f.channels {
                *g.at_mut(p, c) =
                    Vec3::new(w[(p * 3 + c) * 3], w[(p * 3 + c) * 3 + 1], w[(p * 3 + c) * 3 + 2]);
            }
        }
        bb.backward(&group, &cache, &g);
        let mut specs = Vec::new();
        bb.visit_params("", &mut |n, p| specs.push((n.to_string(), p.len())));
        let h = 1e-6;
        let mut checked = 0;
        for (name, len) in specs {
            for idx in (0..len).step_by(17) {
                let mut analytic = 0.0;
                bb.visit_params("", &mut |n, p| {
                    if n == name {
                        analytic = p.grad[idx];
                    }
                });
                let shift = |d: f64, bb: &mut Backbone| {
                    bb.visit_params("", &mut |n, p| {
                        if n == name {
                            p.value[idx] += d;
                        }
                    });
                };
                shift(h, &mut bb);
                let lp = loss_of(&bb);
                shift(-2.0 * h, &mut bb);
                let lm = loss_of(&bb);
                shift(h, &mut bb);
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    (fd - analytic).abs() < 5e-4 * (1.0 + fd.abs()),
                    "{name}[{idx}]: fd {fd} analytic {analytic}"
                );
                checked += 1;
            }
        }
        assert!(checked >= 15);
    }
}
