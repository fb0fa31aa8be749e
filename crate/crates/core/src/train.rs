//! Optimization plumbing and the three-stage pipeline: teacher training on
//! dense query samples, pseudo-ground-truth export, sampling-network
//! training, and student training on the learned sample points.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::align::{umeyama, AlignError, MetricsReport, SampleError};
use crate::geom3::farthest_point_sampling;
use crate::io::PseudoGtRecord;
use crate::nn::{join, Mlp, MlpCache, Module, Param};
use crate::pips::{
    default_jitter, gumbel_noise, loss_pipsc, loss_sparsity, loss_sparsity_grad,
    loss_stability_points, pips_select, GateNet, PipsError,
};
use crate::synth::{split_seed, Sample};
use crate::uncertainty::{
    dense_cube_samples, label_point, loss_adv_aniso_grad, voxel_vote, AnisoGaussian,
    UncertaintyError,
};
use crate::vnconv::{
    query_readout, query_readout_backward, Backbone, BackboneCache, BackboneConfig,
    FeaturePropagation, ImplicitNet, NetConfig, PropagationCache, VnError, VnFeature,
};
use crate::voxel::VoxelGrid;
use crate::{RotationGroup, Vec3};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{stage} diverged at epoch {epoch}: loss {loss}")]
    Diverged {
        stage: &'static str,
        epoch: usize,
        loss: f64,
    },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("pseudo-GT record {got} does not match sample {expect}")]
    GtMismatch { got: String, expect: String },
    #[error("positive voxel {0} has no stored uncertainty")]
    MissingGaussian(usize),
    #[error("sampling networks required for {0} mode")]
    MissingPips(&'static str),
    #[error(transparent)]
    Vn(#[from] VnError),
    #[error(transparent)]
    Pips(#[from] PipsError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error(transparent)]
    Align(#[from] AlignError),
}

/// Stable identifier for a sample, derived from its generator spec.
pub fn sample_id(s: &Sample) -> String {
    format!("{}-{:016x}", s.spec.family.name(), s.spec.seed)
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam with bias correction; moments are keyed by parameter name so the
/// optimizer survives module reconstruction in the same shape.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    /// Steps skipped because some gradient was non-finite.
    pub skipped_nonfinite: usize,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            skipped_nonfinite: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update over every parameter of the module. A non-finite gradient
    /// anywhere skips the whole step and bumps `skipped_nonfinite`.
    /// Gradients are zeroed either way. Returns whether the step was taken.
    pub fn step(&mut self, module: &mut dyn Module) -> bool {
        let mut bad: Option<String> = None;
        module.visit_params("", &mut |name, p| {
            if bad.is_none() && p.grad.iter().any(|g| !g.is_finite()) {
                bad = Some(name.to_string());
            }
        });
        if let Some(name) = bad {
            self.skipped_nonfinite += 1;
            eprintln!("adam: non-finite gradient in {name}; skipping step");
            module.zero_grad();
            return false;
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let moments = &mut self.moments;
        module.visit_params("", &mut |name, p| {
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            for i in 0..p.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.zero_grad();
        });
        true
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub checked: usize,
    /// Coordinates discarded because one-sided differences disagreed,
    /// indicating a kink (e.g. an argmax tie) rather than a smooth point.
    pub skipped_kinks: usize,
}

/// Central finite differences against the analytic gradient over `n_coords`
/// randomly sampled coordinates. `eval` maps a flat parameter vector to
/// (loss, full gradient).
pub fn grad_check(
    x0: &[f64],
    n_coords: usize,
    rng: &mut impl Rng,
    eval: &mut dyn FnMut(&[f64]) -> (f64, Vec<f64>),
) -> GradCheckReport {
    let (f0, g0) = eval(x0);
    let mut x = x0.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coord: 0,
        checked: 0,
        skipped_kinks: 0,
    };
    let budget = 4 * n_coords;
    let mut attempts = 0;
    while report.checked < n_coords && attempts < budget {
        attempts += 1;
        let i = rng.gen_range(0..x.len());
        let h = 1e-5 * x0[i].abs().max(1.0);
        x[i] = x0[i] + h;
        let (fp, _) = eval(&x);
        x[i] = x0[i] - h;
        let (fm, _) = eval(&x);
        x[i] = x0[i];
        let fwd = (fp - f0) / h;
        let bwd = (f0 - fm) / h;
        // One-sided slopes disagreeing beyond FD noise marks a kink; the
        // loss is not differentiable there, so resample.
        let scale = fwd.abs().max(bwd.abs()).max(1.0);
        if (fwd - bwd).abs() > 1e-2 * scale {
            report.skipped_kinks += 1;
            continue;
        }
        let fd = (fp - fm) / (2.0 * h);
        let rel = (fd - g0[i]).abs() / fd.abs().max(g0[i].abs()).max(1e-6);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_coord = i;
        }
        report.checked += 1;
    }
    report
}

// ---------------------------------------------------------------------------
// Training curves
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Curve {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Curve {
    pub fn new(columns: &[&str]) -> Self {
        Curve {
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Option<Self> {
        let mut lines = text.lines();
        let columns: Vec<String> = lines.next()?.split(',').map(|s| s.to_string()).collect();
        let mut rows = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let row: Option<Vec<f64>> = line.split(',').map(|c| c.parse().ok()).collect();
            rows.push(row?);
        }
        Some(Curve { columns, rows })
    }
}

/// Moving-average smoothing used by curve-shape checks.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    values
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let lo = i.saturating_sub(window - 1);
            let s: f64 = values[lo..=i].iter().sum();
            s / (i - lo + 1) as f64
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

/// Deterministic input downsampling: FPS to at most `n` points.
pub fn input_cloud(observed: &[Vec3], n: usize) -> Vec<Vec3> {
    if observed.len() <= n {
        return observed.to_vec();
    }
    let idx = farthest_point_sampling(observed, n).expect("n bounded by len");
    idx.iter().map(|&i| observed[i]).collect()
}

fn check_finite(stage: &'static str, epoch: usize, loss: f64) -> Result<(), TrainError> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(TrainError::Diverged { stage, epoch, loss })
    }
}

// ---------------------------------------------------------------------------
// Stage 1: teacher
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TeacherConfig {
    pub net: NetConfig,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch: usize,
    /// FPS budget for the network input cloud.
    pub input_points: usize,
    /// Query minibatch per cloud per step; a `surface_fraction` share of
    /// surface correspondences,
    /// half draws from the dense cube pool.
    pub queries_per_cloud: usize,
    /// Share of each query minibatch drawn from surface correspondences.
    pub surface_fraction: f64,
    /// Dense off-surface pool per cloud, uniform in the 2x-diagonal cube.
    pub dense_pool: usize,
    pub lr: f64,
    pub lambda_unc: f64,
    pub detach_uncertainty: bool,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            net: NetConfig {
                backbone: BackboneConfig {
                    k_init: 4,
                    receptive_field: 6,
                    n_supports: 7,
                    widths: vec![8, 16],
                    downsample: vec![(0, 3)],
                    support_radius: 0.3,
                    center_rotate: true,
                },
                propagation_k: 3,
                head_widths: vec![32],
                with_uncertainty: true,
            },
            epochs: 50,
            steps_per_epoch: 8,
            batch: 8,
            input_points: 48,
            queries_per_cloud: 32,
            surface_fraction: 0.5,
            dense_pool: 4096,
            lr: 1e-3,
            lambda_unc: 0.1,
            detach_uncertainty: false,
            seed: 0,
        }
    }
}

/// Ground-truth canonical coordinate of an arbitrary camera-frame query:
/// the implicit field is the inverse pose.
pub fn gt_canonical_at(sample: &Sample, q: &Vec3) -> Vec3 {
    sample.gt_pose.inverse().apply(q)
}

/// Queries for one visit of one cloud: surface correspondences plus fresh
/// draws from the sample's seeded dense cube pool.
fn teacher_queries(
    sample: &Sample,
    cfg: &TeacherConfig,
    rng: &mut ChaCha12Rng,
) -> Result<(Vec<Vec3>, Vec<Vec3>), TrainError> {
    let n_surface = ((cfg.queries_per_cloud as f64 * cfg.surface_fraction).round() as usize)
        .min(cfg.queries_per_cloud);
    let n_cube = cfg.queries_per_cloud - n_surface;
    let mut queries = Vec::with_capacity(cfg.queries_per_cloud);
    let mut targets = Vec::with_capacity(cfg.queries_per_cloud);
    for _ in 0..n_surface {
        let i = rng.gen_range(0..sample.observed.len());
        queries.push(sample.observed[i]);
        targets.push(sample.gt_canonical[i]);
    }
    // The pool is regenerated from the sample's own seed so its contents do
    // not depend on visit order.
    let mut pool_rng = ChaCha12Rng::seed_from_u64(split_seed(sample.spec.seed, 0xde52, 0));
    let pool = dense_cube_samples(&sample.observed, cfg.dense_pool, &mut pool_rng)?;
    for _ in 0..n_cube {
        let q = pool[rng.gen_range(0..pool.len())];
        queries.push(q);
        targets.push(gt_canonical_at(sample, &q));
    }
    Ok((queries, targets))
}

/// Stage 1: canonical-coordinate MSE plus the weighted anisotropic
/// uncertainty loss, jointly over the shared backbone.
pub fn train_teacher(
    samples: &[Sample],
    cfg: &TeacherConfig,
    group: &RotationGroup,
) -> Result<(ImplicitNet, Curve), TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(split_seed(cfg.seed, 0x7e4c, 0));
    let mut net = ImplicitNet::new(cfg.net.clone(), &mut rng);
    let mut opt = Adam::new(cfg.lr);
    let mut curve = Curve::new(&["epoch", "mse", "unc", "total", "wall_s"]);
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let (mut ep_mse, mut ep_unc, mut ep_n) = (0.0, 0.0, 0usize);
        for _ in 0..cfg.steps_per_epoch {
            net.zero_grad();
            let mut n_q_total = 0usize;
            let mut picks = Vec::with_capacity(cfg.batch);
            for _ in 0..cfg.batch {
                picks.push(rng.gen_range(0..samples.len()));
            }
            let mut batch_work = Vec::new();
            for &si in &picks {
                let sample = &samples[si];
                let (queries, targets) = teacher_queries(sample, cfg, &mut rng)?;
                n_q_total += queries.len();
                batch_work.push((sample, queries, targets));
            }
            let inv = 1.0 / n_q_total as f64;
            for (sample, queries, targets) in batch_work {
                let cloud = input_cloud(&sample.observed, cfg.input_points);
                let (coords, uncs, cache) = net.forward(&cloud, &queries, group)?;
                let mut grad_coords = Vec::with_capacity(queries.len());
                let mut grad_unc = Vec::with_capacity(queries.len());
                for qi in 0..queries.len() {
                    let d = coords[qi] - targets[qi];
                    ep_mse += d.norm_squared() * inv / cfg.steps_per_epoch as f64;
                    let mut gc = 2.0 * d * inv;
                    let mut gu = [0.0; 7];
                    if cfg.lambda_unc > 0.0 {
                        let u = &uncs[qi];
                        let (lu, gx, gq, gs) = loss_adv_aniso_grad(
                            &coords[qi],
                            &targets[qi],
                            &u.quat_raw,
                            &u.log_scales,
                        )?;
                        ep_unc += lu * inv / cfg.steps_per_epoch as f64;
                        gc += cfg.lambda_unc * inv * gx;
                        for k in 0..4 {
                            gu[k] = cfg.lambda_unc * inv * gq[k];
                        }
                        for k in 0..3 {
                            gu[4 + k] = cfg.lambda_unc * inv * gs[k];
                        }
                    }
                    grad_coords.push(gc);
                    grad_unc.push(gu);
                }
                net.backward(
                    group,
                    &cache,
                    &grad_coords,
                    Some(&grad_unc),
                    cfg.detach_uncertainty,
                );
            }
            opt.step(&mut net);
            ep_n += 1;
        }
        let _ = ep_n;
        let total = ep_mse + cfg.lambda_unc * ep_unc;
        check_finite("teacher", epoch, total)?;
        curve.push(vec![
            epoch as f64,
            ep_mse,
            ep_unc,
            total,
            t0.elapsed().as_secs_f64(),
        ]);
    }
    Ok((net, curve))
}

// ---------------------------------------------------------------------------
// Stage 1b: pseudo-ground-truth export
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PseudoGtConfig {
    /// Positivity threshold on tr(S S^T). The uncertainty loss's
    /// tr(Sigma^-1) term floors this trace at 3 (unit scales at zero
    /// residual), so useful thresholds sit a margin above 3.
    pub omega: f64,
    /// Voxel grid resolution per axis.
    pub h: usize,
    /// Dense probe count per cloud.
    pub n_probe: usize,
    pub input_points: usize,
    pub seed: u64,
}

impl Default for PseudoGtConfig {
    fn default() -> Self {
        PseudoGtConfig {
            omega: 4.5,
            h: 6,
            n_probe: 4096,
            input_points: 48,
            seed: 0,
        }
    }
}

/// Labels every cloud's voxel grid by probing the teacher's uncertainty
/// head densely and majority-voting per voxel; positive voxels keep the
/// predicted Gaussian of the probe nearest the voxel center.
pub fn export_pseudo_gt(
    teacher: &ImplicitNet,
    samples: &[Sample],
    cfg: &PseudoGtConfig,
    group: &RotationGroup,
) -> Result<Vec<PseudoGtRecord>, TrainError> {
    let mut records = Vec::with_capacity(samples.len());
    for (si, sample) in samples.iter().enumerate() {
        let mut rng = ChaCha12Rng::seed_from_u64(split_seed(cfg.seed, 0x96d0, si as u64));
        let cloud = input_cloud(&sample.observed, cfg.input_points);
        let probes = dense_cube_samples(&sample.observed, cfg.n_probe, &mut rng)?;
        let (coords, uncs, _) = teacher.forward(&cloud, &probes, group)?;
        let grid: VoxelGrid<bool> = VoxelGrid::fit(&sample.observed, cfg.h);
        let mut labels = Vec::with_capacity(probes.len());
        let mut gaussians_at = Vec::with_capacity(probes.len());
        for (qi, p) in probes.iter().enumerate() {
            let g = AnisoGaussian::from_raw(
                coords[qi],
                &uncs[qi].quat_raw,
                &uncs[qi].log_scales,
            );
            labels.push(label_point(*p, &g, cfg.omega)?);
            gaussians_at.push(g);
        }
        let voted = voxel_vote(&labels, &grid);
        // Nearest probe to each positive voxel's center supplies its
        // stored uncertainty.
        let mut gaussians = Vec::new();
        for idx in 0..voted.len() {
            if !voted.values[idx] {
                continue;
            }
            let c = voted.center(idx);
            let mut best: Option<(f64, usize)> = None;
            for (qi, p) in probes.iter().enumerate() {
                let d = (p - c).norm_squared();
                if best.map_or(true, |(bd, _)| d < bd) {
                    best = Some((d, qi));
                }
            }
            let (_, qi) = best.expect("probe set nonempty");
            gaussians.push((idx, gaussians_at[qi]));
        }
        records.push(PseudoGtRecord {
            id: sample_id(sample),
            grid: voted,
            gaussians,
        });
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Stage 2: sampling networks
// ---------------------------------------------------------------------------

/// Voxel classifier: the equivariant backbone with features propagated to
/// voxel centers and a scalar logit head.
#[derive(Debug, Clone)]
pub struct PipsClassifier {
    pub backbone: Backbone,
    pub prop: FeaturePropagation,
    pub head: Mlp,
}

pub struct ClassifierCache {
    backbone: BackboneCache,
    prop: PropagationCache,
    prop_channels: usize,
    aug: VnFeature,
    /// Rotation-invariant per-query scalars, also the gate-net input.
    pub invariant: Vec<Vec<f64>>,
    head_caches: Vec<MlpCache>,
}

impl PipsClassifier {
    pub fn new(
        backbone: BackboneConfig,
        propagation_k: usize,
        head_widths: &[usize],
        rng: &mut impl Rng,
    ) -> Self {
        let backbone = Backbone::new(backbone, rng);
        let c = backbone.out_channels();
        let prop = FeaturePropagation::new(c, propagation_k, rng);
        let mut widths = vec![c + 2 * propagation_k];
        widths.extend(head_widths);
        widths.push(1);
        PipsClassifier {
            backbone,
            prop,
            head: Mlp::new(&widths, rng),
        }
    }

    /// Width of the per-query invariant scalar vector.
    pub fn n_features(&self) -> usize {
        self.backbone.out_channels() + 2 * self.prop.k
    }

    pub fn forward(
        &self,
        cloud: &[Vec3],
        queries: &[Vec3],
        group: &RotationGroup,
    ) -> Result<(Vec<f64>, ClassifierCache), VnError> {
        let (feats, bb_cache) = self.backbone.forward(cloud, group)?;
        let (prop_out, prop_cache) =
            self.prop
                .forward(queries, &bb_cache.final_positions, &feats)?;
        let (aug, invariant) =
            query_readout(&prop_out, queries, &bb_cache.final_positions, self.prop.k);
        let mut logits = Vec::with_capacity(queries.len());
        let mut head_caches = Vec::with_capacity(queries.len());
        for scalars in &invariant {
            let (out, cache) = self.head.forward(scalars);
            logits.push(out[0]);
            head_caches.push(cache);
        }
        Ok((
            logits,
            ClassifierCache {
                backbone: bb_cache,
                prop: prop_cache,
                prop_channels: prop_out.channels,
                aug,
                invariant,
                head_caches,
            },
        ))
    }

    pub fn backward(
        &mut self,
        group: &RotationGroup,
        cache: &ClassifierCache,
        grad_logits: &[f64],
    ) {
        let mut grad_scalars = Vec::with_capacity(grad_logits.len());
        for (qi, &g) in grad_logits.iter().enumerate() {
            grad_scalars.push(self.head.backward(&cache.head_caches[qi], &[g]));
        }
        let g_prop_out =
            query_readout_backward(&cache.aug, cache.prop_channels, &grad_scalars);
        let n_src = cache.backbone.final_positions.len();
        let g_src = self.prop.backward(n_src, &cache.prop, &g_prop_out);
        self.backbone.backward(group, &cache.backbone, &g_src);
    }
}

impl Module for PipsClassifier {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.backbone.visit_params(&join(prefix, "backbone"), f);
        self.prop.visit_params(&join(prefix, "prop"), f);
        self.head.visit_params(&join(prefix, "head"), f);
    }
}

/// Trained sampling networks plus the grid resolution they were trained at.
pub struct PipsNets {
    pub classifier: PipsClassifier,
    pub gate: GateNet,
    pub grid_h: usize,
}

impl Module for PipsNets {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.classifier.visit_params(&join(prefix, "clf"), f);
        self.gate.visit_params(&join(prefix, "gate"), f);
    }
}

#[derive(Debug, Clone)]
pub struct PipsConfig {
    pub backbone: BackboneConfig,
    pub propagation_k: usize,
    pub head_widths: Vec<usize>,
    pub epochs: usize,
    pub batch: usize,
    pub input_points: usize,
    pub lr: f64,
    /// Target hard-gate sparsity.
    pub rho: f64,
    pub w_sparsity: f64,
    pub w_stability: f64,
    /// Gumbel noise anneals linearly to zero over this many epochs.
    pub anneal_epochs: usize,
    pub grid_h: usize,
    pub seed: u64,
}

impl Default for PipsConfig {
    fn default() -> Self {
        let teacher = TeacherConfig::default();
        PipsConfig {
            backbone: teacher.net.backbone,
            propagation_k: 3,
            head_widths: vec![32],
            epochs: 50,
            batch: 4,
            input_points: 48,
            lr: 1e-3,
            rho: 0.1,
            w_sparsity: 25.0,
            w_stability: 1.0,
            anneal_epochs: 50,
            grid_h: 6,
            seed: 0,
        }
    }
}

fn snapshot_params(m: &mut dyn Module) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    m.visit_params("", &mut |_, p| out.push(p.value.clone()));
    out
}

fn restore_params(m: &mut dyn Module, snap: &[Vec<f64>]) {
    let mut i = 0;
    m.visit_params("", &mut |_, p| {
        p.value.copy_from_slice(&snap[i]);
        i += 1;
    });
}

fn record_gaussian_map(rec: &PseudoGtRecord) -> BTreeMap<usize, AnisoGaussian> {
    rec.gaussians.iter().map(|(i, g)| (*i, *g)).collect()
}

/// Stage 2: classifier cross-entropy against the pseudo-GT labels, plus the
/// straight-through gate trained with the sparsity and stability losses on
/// the positively labeled voxels.
pub fn train_pips(
    samples: &[Sample],
    records: &[PseudoGtRecord],
    cfg: &PipsConfig,
    group: &RotationGroup,
) -> Result<(PipsNets, Curve), TrainError> {
    if samples.is_empty() || samples.len() != records.len() {
        return Err(TrainError::EmptyDataset);
    }
    for (s, r) in samples.iter().zip(records) {
        let expect = sample_id(s);
        if r.id != expect {
            return Err(TrainError::GtMismatch {
                got: r.id.clone(),
                expect,
            });
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(split_seed(cfg.seed, 0x9195, 0));
    let mut clf = PipsClassifier::new(
        cfg.backbone.clone(),
        cfg.propagation_k,
        &cfg.head_widths,
        &mut rng,
    );
    let mut gate = GateNet::new(clf.n_features(), &mut rng);
    let mut opt_clf = Adam::new(cfg.lr);
    let mut opt_gate = Adam::new(cfg.lr);
    let mut curve = Curve::new(&[
        "epoch",
        "ce",
        "sparsity",
        "stability",
        "hard_rate",
        "clean_rate",
        "wall_s",
    ]);
    let mut best_score = f64::INFINITY;
    let mut best_clf: Vec<Vec<f64>> = Vec::new();
    let mut best_gate: Vec<Vec<f64>> = Vec::new();
    let gaussian_maps: Vec<BTreeMap<usize, AnisoGaussian>> =
        records.iter().map(record_gaussian_map).collect();
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let anneal = (1.0 - epoch as f64 / cfg.anneal_epochs as f64).max(0.0);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let (mut ep_ce, mut ep_sp, mut ep_st) = (0.0, 0.0, 0.0);
        let (mut hard_on, mut hard_n) = (0usize, 0usize);
        let (mut clean_on, mut clean_n, mut clean_st) = (0usize, 0usize, 0.0);
        let mut in_batch = 0usize;
        for &si in &order {
            let sample = &samples[si];
            let rec = &records[si];
            let cloud = input_cloud(&sample.observed, cfg.input_points);
            let centers: Vec<Vec3> = (0..rec.grid.len()).map(|i| rec.grid.center(i)).collect();
            let (logits, cache) = clf.forward(&cloud, &centers, group)?;
            let logit_grid = rec.grid.with_values(logits);
            let (ce_sum, grad_grid) = loss_pipsc(&logit_grid, &rec.grid)?;
            let inv_v = 1.0 / rec.grid.len() as f64;
            ep_ce += ce_sum * inv_v / samples.len() as f64;
            let grad_logits: Vec<f64> = grad_grid.values.iter().map(|g| g * inv_v).collect();
            clf.backward(group, &cache, &grad_logits);

            let positives: Vec<usize> =
                (0..rec.grid.len()).filter(|&i| rec.grid.values[i]).collect();
            if !positives.is_empty() {
                let feats: Vec<Vec<f64>> = positives
                    .iter()
                    .map(|&i| cache.invariant[i].clone())
                    .collect();
                let noise: Vec<f64> = positives
                    .iter()
                    .map(|_| {
                        if anneal > 0.0 {
                            anneal * gumbel_noise(&mut rng)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let (decision, gcache) = gate.forward(&feats, &noise);
                let n = positives.len() as f64;
                // Relaxed occupancy in [0, 1] keeps the sparsity loss
                // differentiable; hard counts are what gets reported.
                let relaxed: f64 =
                    decision.soft.iter().map(|s| (s + 1.0) / 2.0).sum::<f64>() / n;
                let (l_sp, _) = loss_sparsity(relaxed, cfg.rho);
                let dsp = loss_sparsity_grad(relaxed, cfg.rho) / (2.0 * n);
                let mut points = Vec::with_capacity(positives.len());
                for &idx in &positives {
                    let g = gaussian_maps[si]
                        .get(&idx)
                        .ok_or(TrainError::MissingGaussian(idx))?;
                    points.push((rec.grid.center(idx), *g));
                }
                // Straight-through: the stability loss sees the hard gates,
                // its gate gradient flows to the soft values unchanged.
                let (l_st, _, g_gate) = loss_stability_points(&points, Some(&decision.hard))?;
                ep_sp += l_sp / samples.len() as f64;
                ep_st += l_st / samples.len() as f64;
                hard_on += decision.hard.iter().filter(|&&h| h > 0.5).count();
                hard_n += positives.len();
                let grad_soft: Vec<f64> = g_gate
                    .iter()
                    .map(|&g| cfg.w_sparsity * dsp + cfg.w_stability * g)
                    .collect();
                gate.backward(&gcache, &grad_soft);
                // Noise-free pass for checkpoint selection; straight-through
                // training chatters, so the returned gate is the best clean
                // snapshot rather than the last iterate.
                let zero_noise = vec![0.0; feats.len()];
                let (clean, _) = gate.forward(&feats, &zero_noise);
                let (st_clean, _, _) = loss_stability_points(&points, Some(&clean.hard))?;
                clean_on += clean.hard.iter().filter(|&&h| h > 0.5).count();
                clean_n += positives.len();
                clean_st += st_clean / samples.len() as f64;
            }
            in_batch += 1;
            if in_batch == cfg.batch {
                opt_clf.step(&mut clf);
                opt_gate.step(&mut gate);
                in_batch = 0;
            }
        }
        if in_batch > 0 {
            opt_clf.step(&mut clf);
            opt_gate.step(&mut gate);
        }
        let total = ep_ce + cfg.w_sparsity * ep_sp + cfg.w_stability * ep_st;
        check_finite("pips", epoch, total)?;
        let hard_rate = if hard_n > 0 {
            hard_on as f64 / hard_n as f64
        } else {
            0.0
        };
        let clean_rate = if clean_n > 0 {
            clean_on as f64 / clean_n as f64
        } else {
            0.0
        };
        // Selection score: classification quality plus distance to the
        // sparsity target plus spread quality, all on the clean gate.
        let score = ep_ce + 10.0 * (clean_rate - cfg.rho).abs() + cfg.w_stability * clean_st;
        if std::env::var_os("PIPS_DEBUG").is_some() {
            eprintln!(
                "pips epoch {epoch}: ce {ep_ce:.4} sp {ep_sp:.4} st {ep_st:.6} rate {hard_rate:.3} clean {clean_rate:.3} score {score:.4}"
            );
        }
        if score < best_score {
            best_score = score;
            best_clf = snapshot_params(&mut clf);
            best_gate = snapshot_params(&mut gate);
        }
        curve.push(vec![
            epoch as f64,
            ep_ce,
            ep_sp,
            ep_st,
            hard_rate,
            clean_rate,
            t0.elapsed().as_secs_f64(),
        ]);
    }
    if !best_clf.is_empty() {
        restore_params(&mut clf, &best_clf);
        restore_params(&mut gate, &best_gate);
    }
    Ok((
        PipsNets {
            classifier: clf,
            gate,
            grid_h: cfg.grid_h,
        },
        curve,
    ))
}

/// Voxel classification accuracy of the trained classifier against
/// held-out pseudo-GT labels.
pub fn classifier_accuracy(
    nets: &PipsNets,
    samples: &[Sample],
    records: &[PseudoGtRecord],
    input_points: usize,
    group: &RotationGroup,
) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let (mut correct, mut total) = (0usize, 0usize);
    for (sample, rec) in samples.iter().zip(records) {
        let cloud = input_cloud(&sample.observed, input_points);
        let centers: Vec<Vec3> = (0..rec.grid.len()).map(|i| rec.grid.center(i)).collect();
        let (logits, _) = nets.classifier.forward(&cloud, &centers, group)?;
        for (l, &y) in logits.iter().zip(&rec.grid.values) {
            if (*l > 0.0) == y {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

/// Runs the trained sampling networks on one cloud: classifier logits over
/// a grid fit to the observation, noise-free gating of the positive voxels,
/// then jittered emission of the certainty (C) and stability (S) sets.
pub fn pips_points(
    nets: &PipsNets,
    sample: &Sample,
    input_points: usize,
    jitter: Option<f64>,
    group: &RotationGroup,
    rng: &mut impl Rng,
) -> Result<(Vec<Vec3>, Vec<Vec3>), TrainError> {
    let cloud = input_cloud(&sample.observed, input_points);
    let grid: VoxelGrid<bool> = VoxelGrid::fit(&sample.observed, nets.grid_h);
    let centers: Vec<Vec3> = (0..grid.len()).map(|i| grid.center(i)).collect();
    let (logits, cache) = nets.classifier.forward(&cloud, &centers, group)?;
    let logit_grid = grid.with_values(logits);
    let positives: Vec<usize> = (0..logit_grid.len())
        .filter(|&i| logit_grid.values[i] > 0.0)
        .collect();
    if positives.is_empty() {
        return Err(TrainError::Pips(PipsError::NoPositiveVoxels));
    }
    let feats: Vec<Vec<f64>> = positives
        .iter()
        .map(|&i| cache.invariant[i].clone())
        .collect();
    let noise = vec![0.0; feats.len()];
    let (decision, _) = nets.gate.forward(&feats, &noise);
    let sigma = jitter.unwrap_or_else(|| default_jitter(&logit_grid));
    let (c, s) = pips_select(&logit_grid, &decision.hard, sigma, rng)?;
    Ok((c, s))
}

// ---------------------------------------------------------------------------
// Stage 3: student
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudentMode {
    PipsS,
    PipsC,
    Random,
}

impl StudentMode {
    pub fn name(&self) -> &'static str {
        match self {
            StudentMode::PipsS => "pips-s",
            StudentMode::PipsC => "pips-c",
            StudentMode::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pips-s" => Some(StudentMode::PipsS),
            "pips-c" => Some(StudentMode::PipsC),
            "random" => Some(StudentMode::Random),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StudentConfig {
    pub net: NetConfig,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch: usize,
    pub input_points: usize,
    /// Per-cloud query budget in random mode (the dense baseline).
    pub random_budget: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        let teacher = TeacherConfig::default();
        StudentConfig {
            net: NetConfig {
                with_uncertainty: false,
                ..teacher.net
            },
            epochs: 50,
            steps_per_epoch: 8,
            batch: 8,
            input_points: 48,
            random_budget: 256,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StudentStats {
    /// Mean query points consumed per epoch.
    pub queries_per_epoch: f64,
    /// Mean wall time per epoch in seconds.
    pub wall_per_epoch_s: f64,
    /// Clouds that produced no positive voxels and fell back to a small
    /// random query set.
    pub fallback_random: usize,
}

/// Stage 3: MSE-only canonical-coordinate training on mode-selected query
/// points. PIPS query sets are precomputed once per cloud with the trained
/// sampling networks; random mode draws fresh dense-cube queries per visit.
pub fn train_student(
    samples: &[Sample],
    mode: StudentMode,
    pips: Option<&PipsNets>,
    cfg: &StudentConfig,
    group: &RotationGroup,
) -> Result<(ImplicitNet, Curve, StudentStats), TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(split_seed(cfg.seed, 0x57ed, 0));
    let mut fallback_random = 0usize;
    // Fixed per-cloud query sets for the PIPS modes.
    let fixed_queries: Option<Vec<Vec<Vec3>>> = match mode {
        StudentMode::Random => None,
        StudentMode::PipsS | StudentMode::PipsC => {
            let nets = pips.ok_or(TrainError::MissingPips(mode.name()))?;
            let mut all = Vec::with_capacity(samples.len());
            for (si, sample) in samples.iter().enumerate() {
                let mut qrng =
                    ChaCha12Rng::seed_from_u64(split_seed(cfg.seed, 0x5a3e, si as u64));
                match pips_points(nets, sample, cfg.input_points, None, group, &mut qrng) {
                    Ok((c, s)) => {
                        let q = if mode == StudentMode::PipsS { s } else { c };
                        if q.len() >= 3 {
                            all.push(q);
                        } else {
                            fallback_random += 1;
                            all.push(dense_cube_samples(&sample.observed, 32, &mut qrng)?);
                        }
                    }
                    Err(TrainError::Pips(PipsError::NoPositiveVoxels)) => {
                        fallback_random += 1;
                        all.push(dense_cube_samples(&sample.observed, 32, &mut qrng)?);
                    }
                    Err(e) => return Err(e),
                }
            }
            Some(all)
        }
    };
    let mut net = ImplicitNet::new(cfg.net.clone(), &mut rng);
    let mut opt = Adam::new(cfg.lr);
    let mut curve = Curve::new(&["epoch", "mse", "queries", "wall_s"]);
    let (mut sum_q, mut sum_wall) = (0.0, 0.0);
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let mut ep_mse = 0.0;
        let mut ep_queries = 0usize;
        for _ in 0..cfg.steps_per_epoch {
            net.zero_grad();
            let mut picks = Vec::with_capacity(cfg.batch);
            for _ in 0..cfg.batch {
                picks.push(rng.gen_range(0..samples.len()));
            }
            let mut work: Vec<(usize, Vec<Vec3>)> = Vec::with_capacity(cfg.batch);
            let mut n_q_total = 0usize;
            for &si in &picks {
                let queries = match &fixed_queries {
                    Some(all) => all[si].clone(),
                    None => dense_cube_samples(&samples[si].observed, cfg.random_budget, &mut rng)?,
                };
                n_q_total += queries.len();
                work.push((si, queries));
            }
            ep_queries += n_q_total;
            let inv = 1.0 / n_q_total as f64;
            for (si, queries) in work {
                let sample = &samples[si];
                let cloud = input_cloud(&sample.observed, cfg.input_points);
                let (coords, _, cache) = net.forward(&cloud, &queries, group)?;
                let mut grad_coords = Vec::with_capacity(queries.len());
                for (qi, q) in queries.iter().enumerate() {
                    let d = coords[qi] - gt_canonical_at(sample, q);
                    ep_mse += d.norm_squared() * inv / cfg.steps_per_epoch as f64;
                    grad_coords.push(2.0 * d * inv);
                }
                net.backward(group, &cache, &grad_coords, None, false);
            }
            opt.step(&mut net);
        }
        check_finite("student", epoch, ep_mse)?;
        let wall = t0.elapsed().as_secs_f64();
        sum_q += ep_queries as f64;
        sum_wall += wall;
        curve.push(vec![epoch as f64, ep_mse, ep_queries as f64, wall]);
    }
    let stats = StudentStats {
        queries_per_epoch: sum_q / cfg.epochs as f64,
        wall_per_epoch_s: sum_wall / cfg.epochs as f64,
        fallback_random,
    };
    Ok((net, curve, stats))
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub enum EvalQueries {
    /// FPS subset of the observed cloud.
    Observed { n: usize },
    /// The trained sampling pipeline's stability set, optionally jittered
    /// and randomly dropped out.
    PipsS { jitter: f64, dropout: f64 },
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    pub n_total: usize,
    /// Samples where alignment produced a pose.
    pub n_valid: usize,
}

/// Predicts canonical coordinates at the query points (or reads them off
/// the ground truth when `student` is None, the oracle short-circuit) and
/// aligns canonical to camera with a similarity Umeyama fit.
pub fn eval_student(
    student: Option<&ImplicitNet>,
    samples: &[Sample],
    queries: EvalQueries,
    pips: Option<&PipsNets>,
    input_points: usize,
    seed: u64,
    group: &RotationGroup,
) -> Result<EvalOutcome, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut errors: Vec<SampleError> = Vec::new();
    let mut n_valid = 0usize;
    for (si, sample) in samples.iter().enumerate() {
        let mut rng = ChaCha12Rng::seed_from_u64(split_seed(seed, 0xe7a1, si as u64));
        let qset: Option<Vec<Vec3>> = match queries {
            EvalQueries::Observed { n } => Some(input_cloud(&sample.observed, n)),
            EvalQueries::PipsS { jitter, dropout } => {
                let nets = pips.ok_or(TrainError::MissingPips("pips-s eval"))?;
                match pips_points(nets, sample, input_points, Some(jitter), group, &mut rng) {
                    Ok((_, s)) => {
                        let kept: Vec<Vec3> = s
                            .into_iter()
                            .filter(|_| rng.gen::<f64>() >= dropout)
                            .collect();
                        if kept.len() >= 3 {
                            Some(kept)
                        } else {
                            None
                        }
                    }
                    Err(TrainError::Pips(PipsError::NoPositiveVoxels)) => None,
                    Err(e) => return Err(e),
                }
            }
        };
        let Some(qs) = qset else {
            continue;
        };
        let pred: Vec<Vec3> = match student {
            None => qs.iter().map(|q| gt_canonical_at(sample, q)).collect(),
            Some(net) => {
                let cloud = input_cloud(&sample.observed, input_points);
                let (coords, _, _) = net.forward(&cloud, &qs, group)?;
                coords
            }
        };
        match umeyama(&pred, &qs, true) {
            Ok(est) => {
                n_valid += 1;
                let r_gt = sample.gt_pose.rotation.as_matrix();
                let r_est = est.transform.rotation.as_matrix();
                errors.push(SampleError {
                    id: sample_id(sample),
                    rot_deg: crate::align::rotation_error_deg(&r_est, &r_gt),
                    trans_m: (est.transform.translation - sample.gt_pose.translation).norm(),
                });
            }
            Err(_) => continue,
        }
    }
    Ok(EvalOutcome {
        report: MetricsReport { samples: errors },
        n_total: samples.len(),
        n_valid,
    })
}
