use rand::Rng;

use crate::geom3::k_nearest;
use crate::nn::{join, Mlp, MlpCache, Module, Param};
use crate::{RotationGroup, Vec3};

use super::{
    vn_invariant_readout, vn_readout_backward, Backbone, BackboneCache, BackboneConfig,
    FeaturePropagation, PropagationCache, VnError, VnFeature,
};

/// Per-query scalar inputs for the prediction heads: the invariant readout
/// of the propagated features augmented with `k` query-to-source offset
/// channels, followed by the `k` neighbor distances. The offsets rotate
/// with the scene, so every emitted scalar is rotation invariant.
pub fn query_readout(
    prop_out: &VnFeature,
    queries: &[Vec3],
    sources: &[Vec3],
    k: usize,
) -> (VnFeature, Vec<Vec<f64>>) {
    let c = prop_out.channels;
    let mut aug = VnFeature::zeros(prop_out.points, c + k);
    let mut dists = vec![vec![0.0; k]; prop_out.points];
    for (qi, q) in queries.iter().enumerate() {
        for ch in 0..c {
            *aug.at_mut(qi, ch) = *prop_out.at(qi, ch);
        }
        let idx = k_nearest(sources, q, k.min(sources.len()), None);
        for (j, &i) in idx.iter().enumerate() {
            let off = q - sources[i];
            *aug.at_mut(qi, c + j) = off;
            dists[qi][j] = off.norm();
        }
    }
    let readout = vn_invariant_readout(&aug);
    let scalars = readout
        .into_iter()
        .zip(dists)
        .map(|(mut r, d)| {
            r.extend(d);
            r
        })
        .collect();
    (aug, scalars)
}

/// Backward of [`query_readout`] to the propagated feature channels. The
/// offset channels and distances depend only on fixed positions, so their
/// gradients are dropped.
pub fn query_readout_backward(
    aug: &VnFeature,
    c_prop: usize,
    grad_scalars: &[Vec<f64>],
) -> VnFeature {
    let readout_grads: Vec<Vec<f64>> = grad_scalars
        .iter()
        .map(|g| g[..aug.channels].to_vec())
        .collect();
    let g_aug = vn_readout_backward(aug, &readout_grads);
    let mut g_prop = VnFeature::zeros(aug.points, c_prop);
    for p in 0..aug.points {
        for ch in 0..c_prop {
            *g_prop.at_mut(p, ch) = *g_aug.at(p, ch);
        }
    }
    g_prop
}

/// Raw uncertainty head output: unnormalized quaternion plus log-scales.
#[derive(Debug, Clone, Copy)]
pub struct UncertaintyOut {
    pub quat_raw: [f64; 4],
    pub log_scales: [f64; 3],
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct NetConfig {
    pub backbone: BackboneConfig,
    pub propagation_k: usize,
    pub head_widths: Vec<usize>,
    pub with_uncertainty: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            backbone: BackboneConfig::default(),
            propagation_k: 3,
            head_widths: vec![64, 64],
            with_uncertainty: false,
        }
    }
}

/// The implicit canonical-coordinate network: equivariant backbone,
/// feature propagation to query points, invariant readout, and scalar
/// MLP heads.
#[derive(Debug, Clone)]
pub struct ImplicitNet {
    pub config: NetConfig,
    pub backbone: Backbone,
    pub prop: FeaturePropagation,
    pub coord_head: Mlp,
    pub unc_head: Option<Mlp>,
}

pub struct ImplicitNetCache {
    pub backbone: BackboneCache,
    pub prop: PropagationCache,
    pub prop_channels: usize,
    /// Propagated features with the query-offset channels appended.
    pub aug: VnFeature,
    pub invariant: Vec<Vec<f64>>,
    pub coord_caches: Vec<MlpCache>,
    pub unc_caches: Vec<MlpCache>,
}

impl ImplicitNet {
    pub fn new(config: NetConfig, rng: &mut impl Rng) -> Self {
        let backbone = Backbone::new(config.backbone.clone(), rng);
        let c = backbone.out_channels();
        let prop = FeaturePropagation::new(c, config.propagation_k, rng);
        // Heads read the augmented invariant scalars: C readout channels
        // plus k offset-channel projections plus k neighbor distances.
        let n_in = c + 2 * config.propagation_k;
        let mut widths = vec![n_in];
        widths.extend(&config.head_widths);
        widths.push(3);
        let coord_head = Mlp::new(&widths, rng);
        let unc_head = if config.with_uncertainty {
            let mut w = vec![n_in];
            w.extend(&config.head_widths);
            w.push(7);
            Some(Mlp::new(&w, rng))
        } else {
            None
        };
        ImplicitNet {
            config,
            backbone,
            prop,
            coord_head,
            unc_head,
        }
    }

    /// Predict canonical coordinates (and optionally uncertainty) at the
    /// query points.
    pub fn forward(
        &self,
        cloud: &[Vec3],
        queries: &[Vec3],
        group: &RotationGroup,
    ) -> Result<(Vec<Vec3>, Vec<UncertaintyOut>, ImplicitNetCache), VnError> {
        let (feats, bb_cache) = self.backbone.forward(cloud, group)?;
        let (prop_out, prop_cache) =
            self.prop
                .forward(queries, &bb_cache.final_positions, &feats)?;
        let (aug, invariant) = query_readout(
            &prop_out,
            queries,
            &bb_cache.final_positions,
            self.config.propagation_k,
        );
        let mut coords = Vec::with_capacity(queries.len());
        let mut coord_caches = Vec::with_capacity(queries.len());
        let mut uncs = Vec::new();
        let mut unc_caches = Vec::new();
        for scalars in &invariant {
            let (out, cache) = self.coord_head.forward(scalars);
            coords.push(Vec3::new(out[0], out[1], out[2]));
            coord_caches.push(cache);
            if let Some(head) = &self.unc_head {
                let (u, ucache) = head.forward(scalars);
                uncs.push(UncertaintyOut {
                    quat_raw: [u[0], u[1], u[2], u[3]],
                    log_scales: [u[4], u[5], u[6]],
                });
                unc_caches.push(ucache);
            }
        }
        Ok((
            coords,
            uncs,
            ImplicitNetCache {
                backbone: bb_cache,
                prop: prop_cache,
                prop_channels: prop_out.channels,
                aug,
                invariant,
                coord_caches,
                unc_caches,
            },
        ))
    }

    /// Backward from per-query output gradients; `grad_unc` rows are
    /// gradients of the raw 7-vector head output.
    ///
    /// `detach_uncertainty` stops the uncertainty-head gradient at the
    /// shared features.
    pub fn backward(
        &mut self,
        group: &RotationGroup,
        cache: &ImplicitNetCache,
        grad_coords: &[Vec3],
        grad_unc: Option<&[[f64; 7]]>,
        detach_uncertainty: bool,
    ) {
        let n_q = grad_coords.len();
        let mut grad_scalars: Vec<Vec<f64>> = Vec::with_capacity(n_q);
        for qi in 0..n_q {
            let g = grad_coords[qi];
            let mut gs = self
                .coord_head
                .backward(&cache.coord_caches[qi], &[g.x, g.y, g.z]);
            if let (Some(head), Some(gu)) = (self.unc_head.as_mut(), grad_unc) {
                let gfeat = head.backward(&cache.unc_caches[qi], &gu[qi]);
                if !detach_uncertainty {
                    for (a, b) in gs.iter_mut().zip(&gfeat) {
                        *a += b;
                    }
                }
            }
            grad_scalars.push(gs);
        }
        let g_prop_out = query_readout_backward(&cache.aug, cache.prop_channels, &grad_scalars);
        let n_src = cache.backbone.final_positions.len();
        let g_src = self.prop.backward(n_src, &cache.prop, &g_prop_out);
        self.backbone.backward(group, &cache.backbone, &g_src);
    }
}

impl Module for ImplicitNet {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.backbone.visit_params(&join(prefix, "backbone"), f);
        self.prop.visit_params(&join(prefix, "prop"), f);
        self.coord_head.visit_params(&join(prefix, "coord_head"), f);
        if let Some(h) = &mut self.unc_head {
            h.visit_params(&join(prefix, "unc_head"), f);
        }
    }
}
