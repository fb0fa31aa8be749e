//! Learned point selection: voxel-occupancy cross-entropy, straight-through
//! Gumbel gating, the sparsity prior, and the geometric-stability penalty on
//! the 6x6 pose-sensitivity matrix.

use nalgebra::{DMatrix, Matrix3x6, Matrix6};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geom3::{eigh_sym, skew};
use crate::nn::{join, Mlp, MlpCache, Module, Param};
use crate::uncertainty::AnisoGaussian;
use crate::voxel::{LabelGrid, LogitGrid};
use crate::{Mat3, Vec3};

#[derive(Debug, Error)]
pub enum PipsError {
    #[error("voxel grids have different geometry")]
    GridMismatch,
    #[error("scale {0} below the singularity floor 1e-8")]
    SingularScale(f64),
    #[error("stability matrix needs at least one point")]
    EmptyPoints,
    #[error("no positively classified voxels")]
    NoPositiveVoxels,
    #[error("gate decisions have length {got}, expected {expect}")]
    GateLengthMismatch { got: usize, expect: usize },
}

/// Summed binary cross-entropy between `sigmoid(logit)` and the label over
/// all voxels. Returns the loss and the per-voxel logit gradient
/// `sigmoid(logit) - label`.
pub fn loss_pipsc(logits: &LogitGrid, labels: &LabelGrid) -> Result<(f64, LogitGrid), PipsError> {
    if !logits.same_geometry(labels) {
        return Err(PipsError::GridMismatch);
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&l, &y) in logits.values.iter().zip(&labels.values) {
        let y = if y { 1.0 } else { 0.0 };
        // Stable form of -y ln s - (1-y) ln (1-s), s = sigmoid(l).
        loss += l.max(0.0) - l * y + (-l.abs()).exp().ln_1p();
        let s = 1.0 / (1.0 + (-l).exp());
        grad.push(s - y);
    }
    Ok((loss, logits.with_values(grad)))
}

/// Standard Gumbel transform of a uniform draw.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// One standard Gumbel sample, `-ln(-ln u)` with `u` uniform in (0, 1).
pub fn gumbel_noise(rng: &mut impl Rng) -> f64 {
    // Clamp away from the endpoints where the transform diverges.
    let u: f64 = rng.gen::<f64>().clamp(1e-300, 1.0 - 1e-16);
    gumbel_from_uniform(u)
}

/// Soft and hard gate values for the positively classified voxels, plus the
/// soft values the straight-through backward path reuses.
#[derive(Debug, Clone)]
pub struct GateDecision {
    pub soft: Vec<f64>,
    pub hard: Vec<f64>,
}

impl GateDecision {
    /// Hard selection ratio; exact zero soft values count as off.
    pub fn hard_rate(&self) -> f64 {
        if self.hard.is_empty() {
            0.0
        } else {
            self.hard.iter().sum::<f64>() / self.hard.len() as f64
        }
    }

    /// Differentiable selection ratio, the mean of `(soft + 1) / 2`.
    pub fn soft_rate(&self) -> f64 {
        if self.soft.is_empty() {
            0.0
        } else {
            self.soft.iter().map(|s| (s + 1.0) * 0.5).sum::<f64>() / self.soft.len() as f64
        }
    }
}

/// Forward of the hard threshold; gradient contract is identity
/// (straight-through).
pub fn hard_gate(soft: &[f64]) -> Vec<f64> {
    soft.iter().map(|&s| if s > 0.0 { 1.0 } else { 0.0 }).collect()
}

pub struct GateCache {
    pub mlp_caches: Vec<MlpCache>,
    pub pre_tanh: Vec<f64>,
}

/// Per-voxel gating network: a two-layer scalar MLP (hidden width 64) whose
/// output plus Gumbel noise passes through tanh.
#[derive(Debug, Clone)]
pub struct GateNet {
    pub mlp: Mlp,
}

impl GateNet {
    pub fn new(n_in: usize, rng: &mut impl Rng) -> Self {
        GateNet {
            mlp: Mlp::new(&[n_in, 64, 1], rng),
        }
    }

    /// `soft_i = tanh(G(F_i) + noise_i)`; `hard` thresholds at zero.
    pub fn forward(&self, feats: &[Vec<f64>], noise: &[f64]) -> (GateDecision, GateCache) {
        assert_eq!(feats.len(), noise.len());
        let mut soft = Vec::with_capacity(feats.len());
        let mut mlp_caches = Vec::with_capacity(feats.len());
        let mut pre_tanh = Vec::with_capacity(feats.len());
        for (f, &eta) in feats.iter().zip(noise) {
            let (y, cache) = self.mlp.forward(f);
            let pre = y[0] + eta;
            soft.push(pre.tanh());
            mlp_caches.push(cache);
            pre_tanh.push(pre);
        }
        let hard = hard_gate(&soft);
        (GateDecision { soft, hard }, GateCache { mlp_caches, pre_tanh })
    }

    /// Backward from gradients w.r.t. the soft gate values. Returns the
    /// per-voxel feature gradients.
    pub fn backward(&mut self, cache: &GateCache, grad_soft: &[f64]) -> Vec<Vec<f64>> {
        let mut grads = Vec::with_capacity(grad_soft.len());
        for (i, &g) in grad_soft.iter().enumerate() {
            let t = cache.pre_tanh[i].tanh();
            let g_pre = g * (1.0 - t * t);
            grads.push(self.mlp.backward(&cache.mlp_caches[i], &[g_pre]));
        }
        grads
    }
}

impl Module for GateNet {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.mlp.visit_params(&join(prefix, "gate"), f);
    }
}

/// KL divergence between the target sparsity and the achieved rate,
/// `rho ln(rho/g) + (1-rho) ln((1-rho)/(1-g))`. Inputs at the {0, 1}
/// endpoints are clamped to [1e-6, 1-1e-6]; the flag reports clamping.
pub fn loss_sparsity(g: f64, rho: f64) -> (f64, bool) {
    let clamp = |x: f64| x.clamp(1e-6, 1.0 - 1e-6);
    let (gc, rc) = (clamp(g), clamp(rho));
    let clamped = gc != g || rc != rho;
    let loss = rc * (rc / gc).ln() + (1.0 - rc) * ((1.0 - rc) / (1.0 - gc)).ln();
    (loss, clamped)
}

/// Derivative of [`loss_sparsity`] w.r.t. the achieved rate `g`.
pub fn loss_sparsity_grad(g: f64, rho: f64) -> f64 {
    let clamp = |x: f64| x.clamp(1e-6, 1.0 - 1e-6);
    let (gc, rc) = (clamp(g), clamp(rho));
    -rc / gc + (1.0 - rc) / (1.0 - gc)
}

fn inv_scale_rot_t(g: &AnisoGaussian) -> Result<Mat3, PipsError> {
    for i in 0..3 {
        if g.scales[i] < 1e-8 {
            return Err(PipsError::SingularScale(g.scales[i]));
        }
    }
    let rt = g.rot.as_matrix().transpose();
    let mut b = rt;
    for i in 0..3 {
        for j in 0..3 {
            b[(i, j)] = rt[(i, j)] / g.scales[i];
        }
    }
    Ok(b)
}

/// Jacobian of the whitened point movement w.r.t. the pose perturbation
/// `[dr; dt]`: `J = [-S^-1 R^T x^, S^-1 R^T]`.
pub fn point_jacobian(x: &Vec3, g: &AnisoGaussian) -> Result<Matrix3x6<f64>, PipsError> {
    let b = inv_scale_rot_t(g)?;
    let a = -b * skew(x);
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&a);
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&b);
    Ok(j)
}

/// Linearized whitened movement of one point under a small pose
/// perturbation: `S^-1 R^T (-x^ dr + dt)`.
pub fn per_point_movement(
    x: &Vec3,
    g: &AnisoGaussian,
    dr: &Vec3,
    dt: &Vec3,
) -> Result<Vec3, PipsError> {
    let b = inv_scale_rot_t(g)?;
    Ok(b * (-skew(x) * dr + dt))
}

/// Pose-sensitivity quadratic form over a selected point set.
#[derive(Debug, Clone)]
pub struct StabilityMatrix {
    pub c: Matrix6<f64>,
}

impl StabilityMatrix {
    /// Ascending eigenvalues and eigenvectors (columns).
    pub fn eig(&self) -> (Vec<f64>, DMatrix<f64>) {
        let dm = DMatrix::from_fn(6, 6, |i, j| self.c[(i, j)]);
        let (vals, vecs) = eigh_sym(&dm).expect("stability matrix is finite symmetric");
        (vals.iter().copied().collect(), vecs)
    }
}

/// `C = sum_p w_p J_p^T J_p` with optional per-point weights (gates).
pub fn stability_matrix_weighted(
    points: &[(Vec3, AnisoGaussian)],
    weights: Option<&[f64]>,
) -> Result<StabilityMatrix, PipsError> {
    if points.is_empty() {
        return Err(PipsError::EmptyPoints);
    }
    if let Some(w) = weights {
        if w.len() != points.len() {
            return Err(PipsError::GateLengthMismatch { got: w.len(), expect: points.len() });
        }
    }
    let mut c = Matrix6::zeros();
    for (p, (x, g)) in points.iter().enumerate() {
        let j = point_jacobian(x, g)?;
        let w = weights.map_or(1.0, |w| w[p]);
        c += j.transpose() * j * w;
    }
    // Force exact symmetry against accumulation round-off.
    c = (c + c.transpose()) * 0.5;
    Ok(StabilityMatrix { c })
}

pub fn stability_matrix(points: &[(Vec3, AnisoGaussian)]) -> Result<StabilityMatrix, PipsError> {
    stability_matrix_weighted(points, None)
}

/// The same matrix built as the explicit block product of the stacked
/// transposed Jacobians with the stacked Jacobians. Kept as a reference
/// form; the accumulation form above is what training uses.
pub fn stability_matrix_blocks(
    points: &[(Vec3, AnisoGaussian)],
) -> Result<StabilityMatrix, PipsError> {
    if points.is_empty() {
        return Err(PipsError::EmptyPoints);
    }
    let n = points.len();
    let mut c2 = DMatrix::zeros(3 * n, 6);
    for (p, (x, g)) in points.iter().enumerate() {
        let j = point_jacobian(x, g)?;
        for i in 0..3 {
            for k in 0..6 {
                c2[(3 * p + i, k)] = j[(i, k)];
            }
        }
    }
    let c1 = c2.transpose();
    let prod = c1 * &c2;
    let mut c = Matrix6::zeros();
    for i in 0..6 {
        for k in 0..6 {
            c[(i, k)] = prod[(i, k)];
        }
    }
    Ok(StabilityMatrix { c })
}

/// `sum_i exp(-lambda_i)` and its gradient w.r.t. the matrix,
/// `-sum_i exp(-lambda_i) v_i v_i^T`. The formula is stable under eigenvalue
/// clustering because coincident eigenvalues share the same weight.
pub fn loss_stability(c: &StabilityMatrix) -> (f64, Matrix6<f64>) {
    let (vals, vecs) = c.eig();
    let mut loss = 0.0;
    let mut grad = Matrix6::zeros();
    for i in 0..6 {
        let w = (-vals[i]).exp();
        loss += w;
        for a in 0..6 {
            for b in 0..6 {
                grad[(a, b)] -= w * vecs[(a, i)] * vecs[(b, i)];
            }
        }
    }
    (loss, grad)
}

/// Stability loss over a gated point set with gradients w.r.t. the point
/// coordinates and the (straight-through) gate values.
pub fn loss_stability_points(
    points: &[(Vec3, AnisoGaussian)],
    gates: Option<&[f64]>,
) -> Result<(f64, Vec<Vec3>, Vec<f64>), PipsError> {
    let c = stability_matrix_weighted(points, gates)?;
    let (loss, dl_dc) = loss_stability(&c);
    let mut grad_x = Vec::with_capacity(points.len());
    let mut grad_gate = Vec::with_capacity(points.len());
    for (p, (x, g)) in points.iter().enumerate() {
        let j = point_jacobian(x, g)?;
        let w = gates.map_or(1.0, |w| w[p]);
        let cp = j.transpose() * j;
        grad_gate.push(dl_dc.component_mul(&cp).sum());
        let b = inv_scale_rot_t(g)?;
        let mut gx = Vec3::zeros();
        for k in 0..3 {
            // dJ/dx_k perturbs only the rotational block: -B skew(e_k).
            let mut e = Vec3::zeros();
            e[k] = 1.0;
            let da = -b * skew(&e);
            let mut dj = Matrix3x6::zeros();
            dj.fixed_view_mut::<3, 3>(0, 0).copy_from(&da);
            // dC_p = dJ^T J + J^T dJ; with symmetric dl_dc both halves
            // contribute equally.
            let half = j.transpose() * dj;
            gx[k] = 2.0 * w * dl_dc.component_mul(&half).sum();
        }
        grad_x.push(gx);
    }
    Ok((loss, grad_x, grad_gate))
}

/// Emit the selected point sets from the classifier logits and the gate
/// decisions (one per positively classified voxel, ascending voxel index).
/// Every emitted point is jittered with isotropic Gaussian noise.
pub fn pips_select(
    logits: &LogitGrid,
    hard: &[f64],
    sigma_jitter: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<Vec3>, Vec<Vec3>), PipsError> {
    let positives: Vec<usize> = (0..logits.len()).filter(|&i| logits.values[i] > 0.0).collect();
    if positives.is_empty() {
        return Err(PipsError::NoPositiveVoxels);
    }
    if hard.len() != positives.len() {
        return Err(PipsError::GateLengthMismatch { got: hard.len(), expect: positives.len() });
    }
    let normal = Normal::new(0.0, sigma_jitter).expect("finite sigma");
    let jitter = |p: Vec3, rng: &mut dyn rand::RngCore| {
        p + Vec3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng))
    };
    let mut pipsc = Vec::with_capacity(positives.len());
    let mut pipss = Vec::new();
    for (k, &idx) in positives.iter().enumerate() {
        let c = logits.center(idx);
        pipsc.push(jitter(c, rng));
        if hard[k] > 0.5 {
            pipss.push(jitter(c, rng));
        }
    }
    Ok((pipsc, pipss))
}

/// Default jitter scale: one percent of a voxel edge.
pub fn default_jitter(grid: &LogitGrid) -> f64 {
    0.01 * grid.cell_size()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::VoxelGrid;
    use crate::Rotation;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn rand_gauss(rng: &mut StdRng, lo: f64, hi: f64) -> AnisoGaussian {
        AnisoGaussian {
            mean: Vec3::zeros(),
            rot: Rotation::from_axis_angle(
                &Vec3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(0.1..1.0),
                ),
                rng.gen_range(-3.0..3.0),
            ),
            scales: Vec3::new(rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)),
        }
    }

    fn rand_vec(rng: &mut StdRng) -> Vec3 {
        Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn cross_entropy_saturated_and_uniform() {
        let grid: LogitGrid = VoxelGrid::new(2, Vec3::zeros(), 1.0);
        let labels = grid.with_values((0..8).map(|i| i % 2 == 0).collect());
        let logits = grid.with_values(
            labels.values.iter().map(|&y| if y { 20.0 } else { -20.0 }).collect(),
        );
        let (loss, _) = loss_pipsc(&logits, &labels).unwrap();
        assert!(loss < 1e-6);
        let zero = grid.with_values(vec![0.0; 8]);
        let (loss, grad) = loss_pipsc(&zero, &labels).unwrap();
        assert!((loss - 8.0 * 2.0f64.ln()).abs() < 1e-12);
        for (g, &y) in grad.values.iter().zip(&labels.values) {
            let expect = 0.5 - if y { 1.0 } else { 0.0 };
            assert!((g - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_matches_direct_loop() {
        let mut rng = StdRng::seed_from_u64(1);
        let grid: LogitGrid = VoxelGrid::new(3, Vec3::zeros(), 1.0);
        let labels = grid.with_values((0..27).map(|_| rng.gen_bool(0.5)).collect());
        let logits = grid.with_values((0..27).map(|_| rng.gen_range(-4.0..4.0)).collect());
        let (loss, grad) = loss_pipsc(&logits, &labels).unwrap();
        let mut expect = 0.0;
        for (&l, &y) in logits.values.iter().zip(&labels.values) {
            let s = 1.0 / (1.0 + (-l).exp());
            expect -= if y { s.ln() } else { (1.0 - s).ln() };
        }
        assert!((loss - expect).abs() < 1e-10);
        // Gradient against finite differences on a few voxels.
        for idx in [0, 5, 13, 26] {
            let h = 1e-6;
            let mut lp = logits.clone();
            lp.values[idx] += h;
            let mut lm = logits.clone();
            lm.values[idx] -= h;
            let fd = (loss_pipsc(&lp, &labels).unwrap().0 - loss_pipsc(&lm, &labels).unwrap().0)
                / (2.0 * h);
            assert!((fd - grad.values[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_rejects_mismatched_grids() {
        let a: LogitGrid = VoxelGrid::new(2, Vec3::zeros(), 1.0);
        let b: LabelGrid = VoxelGrid::new(3, Vec3::zeros(), 1.0);
        assert!(loss_pipsc(&a, &b).is_err());
    }

    #[test]
    fn gumbel_fixed_point_and_monotonicity() {
        assert!(gumbel_from_uniform(1.0 / 1.0f64.exp()).abs() < 1e-14);
        let mut prev = f64::NEG_INFINITY;
        for i in 1..200 {
            let u = i as f64 / 200.0;
            let v = gumbel_from_uniform(u);
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn gumbel_mean_is_euler_mascheroni() {
        let mut rng = StdRng::seed_from_u64(2);
        let n = 1_000_000;
        let mean: f64 = (0..n).map(|_| gumbel_noise(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 0.5772156649).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn soft_gate_saturation_and_zero() {
        let mut rng = StdRng::seed_from_u64(3);
        let mut net = GateNet::new(4, &mut rng);
        // Zero weights, large negative output bias: soft saturates at -1.
        net.visit_params("", &mut |_, p| p.value.iter_mut().for_each(|v| *v = 0.0));
        let last = net.mlp.layers.len() - 1;
        net.mlp.layers[last].b.value[0] = -30.0;
        let feats = vec![vec![0.5, -0.5, 1.0, 0.0]];
        let (d, _) = net.forward(&feats, &[0.0]);
        assert!((d.soft[0] + 1.0).abs() < 1e-12);
        assert_eq!(d.hard[0], 0.0);
        net.mlp.layers[last].b.value[0] = 0.0;
        let (d, _) = net.forward(&feats, &[0.0]);
        assert_eq!(d.soft[0], 0.0);
        // Declared tie rule: soft exactly zero gates off.
        assert_eq!(d.hard[0], 0.0);
    }

    #[test]
    fn hard_gate_thresholds() {
        assert_eq!(hard_gate(&[0.3, -0.7]), vec![1.0, 0.0]);
        assert_eq!(hard_gate(&[0.0]), vec![0.0]);
    }

    #[test]
    fn gate_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(4);
        let mut net = GateNet::new(3, &mut rng);
        let feats: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let noise: Vec<f64> = (0..5).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let w: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss_of = |net: &GateNet| {
            let (d, _) = net.forward(&feats, &noise);
            d.soft.iter().zip(&w).map(|(s, wi)| s * wi).sum::<f64>()
        };
        net.zero_grad();
        let (_, cache) = net.forward(&feats, &noise);
        net.backward(&cache, &w);
        let mut specs = Vec::new();
        net.visit_params("", &mut |n, p| specs.push((n.to_string(), p.len())));
        let h = 1e-6;
        for (name, len) in specs {
            for idx in (0..len).step_by(29) {
                let mut analytic = 0.0;
                net.visit_params("", &mut |n, p| {
                    if n == name {
                        analytic = p.grad[idx];
                    }
                });
                let shift = |d: f64, net: &mut GateNet| {
                    net.visit_params("", &mut |n, p| {
                        if n == name {
                            p.value[idx] += d;
                        }
                    });
                };
                shift(h, &mut net);
                let lp = loss_of(&net);
                shift(-2.0 * h, &mut net);
                let lm = loss_of(&net);
                shift(h, &mut net);
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    (fd - analytic).abs() < 1e-4 * (1.0 + fd.abs()),
                    "{name}[{idx}]: fd {fd} analytic {analytic}"
                );
            }
        }
    }

    #[test]
    fn sparsity_loss_values() {
        assert!(loss_sparsity(0.1, 0.1).0.abs() < 1e-14);
        let (l, flagged) = loss_sparsity(0.5, 0.1);
        let expect = 0.1 * 0.2f64.ln() + 0.9 * 1.8f64.ln();
        assert!((l - expect).abs() < 1e-12);
        assert!(!flagged);
        assert!(loss_sparsity(0.0, 0.1).1);
        assert!(loss_sparsity(1.0, 0.1).1);
        for i in 1..100 {
            let g = i as f64 / 100.0;
            let l = loss_sparsity(g, 0.1).0;
            if (g - 0.1).abs() > 1e-12 {
                assert!(l > 0.0, "g={g} loss={l}");
            }
        }
    }

    #[test]
    fn sparsity_gradient_matches_finite_differences() {
        let h = 1e-7;
        for g in [0.05, 0.1, 0.3, 0.8] {
            let fd = (loss_sparsity(g + h, 0.1).0 - loss_sparsity(g - h, 0.1).0) / (2.0 * h);
            assert!((fd - loss_sparsity_grad(g, 0.1)).abs() < 1e-5);
        }
    }

    #[test]
    fn movement_trivial_cases() {
        let g = AnisoGaussian::isotropic(Vec3::zeros(), 1.0);
        let x = Vec3::new(0.3, -0.2, 0.5);
        let zero = per_point_movement(&x, &g, &Vec3::zeros(), &Vec3::zeros()).unwrap();
        assert!(zero.norm() < 1e-15);
        let dt = Vec3::new(0.1, 0.2, -0.3);
        let m = per_point_movement(&x, &g, &Vec3::zeros(), &dt).unwrap();
        assert!((m - dt).norm() < 1e-15);
        let mut bad = g;
        bad.scales.x = 0.0;
        assert!(per_point_movement(&x, &bad, &Vec3::zeros(), &dt).is_err());
    }

    #[test]
    fn movement_linearization_is_second_order() {
        // Exact movement uses dR = exp(dr^); the linearized error must
        // shrink quadratically with the perturbation size.
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..20 {
            let g = rand_gauss(&mut rng, 0.3, 2.0);
            let x = rand_vec(&mut rng);
            let dr0 = rand_vec(&mut rng);
            let dt0 = rand_vec(&mut rng);
            let b = {
                let rt = g.rot.as_matrix().transpose();
                Mat3::from_fn(|i, j| rt[(i, j)] / g.scales[i])
            };
            let exact = |eps: f64| {
                let dr = dr0 * eps;
                let dt = dt0 * eps;
                let dr_mat = Rotation::from_rotation_vector(&dr).as_matrix();
                b * (dr_mat * x + dt - x)
            };
            let lin = |eps: f64| {
                per_point_movement(&x, &g, &(dr0 * eps), &(dt0 * eps)).unwrap()
            };
            let e1 = (exact(1e-2) - lin(1e-2)).norm();
            let e2 = (exact(5e-3) - lin(5e-3)).norm();
            if e1 > 1e-12 {
                let ratio = e1 / e2;
                assert!((ratio - 4.0).abs() < 0.5, "ratio {ratio}");
            }
        }
    }

    #[test]
    fn stability_origin_point_identity_covariance() {
        let pts = vec![(Vec3::zeros(), AnisoGaussian::isotropic(Vec3::zeros(), 1.0))];
        let c = stability_matrix(&pts).unwrap();
        let mut expect = Matrix6::zeros();
        for i in 3..6 {
            expect[(i, i)] = 1.0;
        }
        assert!((c.c - expect).norm() < 1e-14);
    }

    #[test]
    fn collinear_points_leave_axis_rotation_free() {
        let pts: Vec<(Vec3, AnisoGaussian)> = (0..5)
            .map(|i| {
                (
                    Vec3::new(i as f64 * 0.3, 0.0, 0.0),
                    AnisoGaussian::isotropic(Vec3::zeros(), 1.0),
                )
            })
            .collect();
        let c = stability_matrix(&pts).unwrap();
        let (vals, vecs) = c.eig();
        assert!(vals[0].abs() < 1e-12);
        // The null direction is rotation about the x axis.
        let v = vecs.column(0);
        let expect = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let dot: f64 = (0..6).map(|i| v[i] * expect[i]).sum();
        assert!(dot.abs() > 1.0 - 1e-9);
    }

    #[test]
    fn three_noncollinear_points_pin_all_modes() {
        let pts = vec![
            (Vec3::new(0.5, 0.0, 0.0), AnisoGaussian::isotropic(Vec3::zeros(), 1.0)),
            (Vec3::new(0.0, 0.5, 0.0), AnisoGaussian::isotropic(Vec3::zeros(), 1.0)),
            (Vec3::new(0.0, 0.0, 0.5), AnisoGaussian::isotropic(Vec3::zeros(), 1.0)),
        ];
        let c = stability_matrix(&pts).unwrap();
        let (vals, _) = c.eig();
        for v in vals {
            assert!(v > 1e-3, "eigenvalue {v}");
        }
    }

    #[test]
    fn quadratic_form_matches_movement_sum() {
        let mut rng = StdRng::seed_from_u64(6);
        for _ in 0..200 {
            let n = rng.gen_range(1..6);
            let pts: Vec<(Vec3, AnisoGaussian)> = (0..n)
                .map(|_| (rand_vec(&mut rng), rand_gauss(&mut rng, 0.3, 2.0)))
                .collect();
            let dr = rand_vec(&mut rng) * 0.1;
            let dt = rand_vec(&mut rng) * 0.1;
            let c = stability_matrix(&pts).unwrap();
            let mut v = nalgebra::Vector6::zeros();
            for i in 0..3 {
                v[i] = dr[i];
                v[i + 3] = dt[i];
            }
            let quad = (v.transpose() * c.c * v)[(0, 0)];
            let direct: f64 = pts
                .iter()
                .map(|(x, g)| per_point_movement(x, g, &dr, &dt).unwrap().norm_squared())
                .sum();
            assert!((quad - direct).abs() < 1e-8 * (1.0 + direct.abs()));
        }
    }

    #[test]
    fn block_product_matches_accumulation_and_psd() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rng.gen_range(1..8);
            let pts: Vec<(Vec3, AnisoGaussian)> = (0..n)
                .map(|_| (rand_vec(&mut rng), rand_gauss(&mut rng, 0.3, 2.0)))
                .collect();
            let a = stability_matrix(&pts).unwrap();
            let b = stability_matrix_blocks(&pts).unwrap();
            assert!((a.c - b.c).norm() < 1e-10 * (1.0 + a.c.norm()));
            assert!((a.c - a.c.transpose()).norm() < 1e-10);
            let (vals, _) = a.eig();
            assert!(vals[0] >= -1e-9);
        }
    }

    #[test]
    fn stability_conjugates_under_shared_rotation() {
        let mut rng = StdRng::seed_from_u64(8);
        let pts: Vec<(Vec3, AnisoGaussian)> = (0..6)
            .map(|_| (rand_vec(&mut rng), rand_gauss(&mut rng, 0.3, 2.0)))
            .collect();
        let c = stability_matrix(&pts).unwrap();
        let q = Rotation::from_axis_angle(&Vec3::new(0.2, -0.5, 0.8), 1.1);
        let qm = q.as_matrix();
        let rotated: Vec<(Vec3, AnisoGaussian)> = pts
            .iter()
            .map(|(x, g)| {
                let mut g2 = *g;
                g2.rot = q.compose(&g.rot);
                (qm * x, g2)
            })
            .collect();
        let c2 = stability_matrix(&rotated).unwrap();
        let mut t = Matrix6::zeros();
        t.fixed_view_mut::<3, 3>(0, 0).copy_from(&qm);
        t.fixed_view_mut::<3, 3>(3, 3).copy_from(&qm);
        assert!((c2.c - t * c.c * t.transpose()).norm() < 1e-10 * (1.0 + c.c.norm()));
        // Translational 3x3 block keeps its eigenvalue multiset.
        let tr = |m: &Matrix6<f64>| {
            let block = DMatrix::from_fn(3, 3, |i, j| m[(i + 3, j + 3)]);
            eigh_sym(&block).unwrap().0
        };
        let (e1, e2) = (tr(&c.c), tr(&c2.c));
        for i in 0..3 {
            assert!((e1[i] - e2[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn stability_loss_closed_forms() {
        let (l, _) = loss_stability(&StabilityMatrix { c: Matrix6::zeros() });
        assert!((l - 6.0).abs() < 1e-12);
        let (l, _) = loss_stability(&StabilityMatrix { c: Matrix6::identity() * 2.0f64.ln() });
        assert!((l - 3.0).abs() < 1e-12);
    }

    #[test]
    fn stability_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..10 {
            let n = rng.gen_range(3..6);
            let pts: Vec<(Vec3, AnisoGaussian)> = (0..n)
                .map(|_| (rand_vec(&mut rng), rand_gauss(&mut rng, 0.5, 1.5)))
                .collect();
            let gates: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
            let (_, gx, gg) = loss_stability_points(&pts, Some(&gates)).unwrap();
            let h = 1e-6;
            for p in 0..n {
                for k in 0..3 {
                    let mut plus = pts.clone();
                    plus[p].0[k] += h;
                    let mut minus = pts.clone();
                    minus[p].0[k] -= h;
                    let fd = (loss_stability_points(&plus, Some(&gates)).unwrap().0
                        - loss_stability_points(&minus, Some(&gates)).unwrap().0)
                        / (2.0 * h);
                    assert!(
                        (fd - gx[p][k]).abs() < 1e-3 * (1.0 + fd.abs()),
                        "point {p} coord {k}: fd {fd} analytic {}",
                        gx[p][k]
                    );
                }
                let mut gp = gates.clone();
                gp[p] += h;
                let mut gm = gates.clone();
                gm[p] -= h;
                let fd = (loss_stability_points(&pts, Some(&gp)).unwrap().0
                    - loss_stability_points(&pts, Some(&gm)).unwrap().0)
                    / (2.0 * h);
                assert!(
                    (fd - gg[p]).abs() < 1e-3 * (1.0 + fd.abs()),
                    "gate {p}: fd {fd} analytic {}",
                    gg[p]
                );
            }
        }
    }

    #[test]
    fn select_error_and_passthrough() {
        let grid: LogitGrid = VoxelGrid::new(2, Vec3::zeros(), 1.0);
        let all_neg = grid.with_values(vec![-1.0; 8]);
        let mut rng = StdRng::seed_from_u64(10);
        assert!(matches!(
            pips_select(&all_neg, &[], 0.0, &mut rng),
            Err(PipsError::NoPositiveVoxels)
        ));
        let logits = grid.with_values(vec![1.0, -1.0, 2.0, -1.0, 0.5, -1.0, -1.0, 3.0]);
        let (pc, ps) = pips_select(&logits, &[1.0; 4], 0.0, &mut rng).unwrap();
        assert_eq!(pc.len(), 4);
        assert_eq!(pc, ps);
        // Zero jitter puts points exactly on voxel centers.
        assert!((pc[0] - grid.center(0)).norm() < 1e-15);
        let (_, ps) = pips_select(&logits, &[1.0, 0.0, 0.0, 1.0], 0.0, &mut rng).unwrap();
        assert_eq!(ps.len(), 2);
        assert!(pips_select(&logits, &[1.0; 3], 0.0, &mut rng).is_err());
    }

    #[test]
    fn select_is_deterministic_given_seed() {
        let grid: LogitGrid = VoxelGrid::new(2, Vec3::zeros(), 1.0);
        let logits = grid.with_values(vec![1.0; 8]);
        let sigma = default_jitter(&logits);
        let mut r1 = StdRng::seed_from_u64(11);
        let a = pips_select(&logits, &[1.0; 8], sigma, &mut r1).unwrap();
        let mut r2 = StdRng::seed_from_u64(11);
        let b = pips_select(&logits, &[1.0; 8], sigma, &mut r2).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        for (p, idx) in a.0.iter().zip(0..8) {
            assert!((p - grid.center(idx)).norm() < 10.0 * sigma);
        }
    }

    // Straight-through check: the trained gate pattern must land within 5%
    // of the exhaustive optimum of the combined sparsity + stability loss.
    #[test]
    fn straight_through_recovers_near_optimal_pattern() {
        let mut rng = StdRng::seed_from_u64(12);
        let k = 8;
        let rho = 0.1;
        let pts: Vec<(Vec3, AnisoGaussian)> = (0..k)
            .map(|_| (rand_vec(&mut rng), rand_gauss(&mut rng, 0.15, 0.4)))
            .collect();
        let pattern_loss = |pattern: &[f64]| {
            let rate = pattern.iter().sum::<f64>() / k as f64;
            let (ls, _) = loss_sparsity(rate, rho);
            let (lst, _, _) = loss_stability_points(&pts, Some(pattern)).unwrap();
            ls + lst
        };
        let mut best = f64::INFINITY;
        for mask in 0u32..(1 << k) {
            let pattern: Vec<f64> =
                (0..k).map(|i| if mask >> i & 1 == 1 { 1.0 } else { 0.0 }).collect();
            best = best.min(pattern_loss(&pattern));
        }

        let feats: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut net = GateNet::new(4, &mut rng);
        let n_params = net.param_count();
        let (mut m1, mut m2) = (vec![0.0; n_params], vec![0.0; n_params]);
        let epochs = 600;
        let lr = 0.05;
        let mut step = 0;
        let mut achieved = f64::INFINITY;
        for epoch in 0..epochs {
            let anneal = (1.0 - epoch as f64 / 50.0).max(0.0);
            let noise: Vec<f64> = (0..k).map(|_| anneal * gumbel_noise(&mut rng)).collect();
            net.zero_grad();
            let (d, cache) = net.forward(&feats, &noise);
            let (_, _, grad_gate) = loss_stability_points(&pts, Some(&d.hard)).unwrap();
            let g_soft_rate = loss_sparsity_grad(d.soft_rate(), rho) / (2.0 * k as f64);
            // Straight-through: stability reaches soft through the hard
            // gate with unit jacobian; sparsity through the soft rate. The
            // two terms have wildly different magnitudes, so clip.
            let grad_soft: Vec<f64> = grad_gate
                .iter()
                .map(|g| (g + g_soft_rate).clamp(-1.0, 1.0))
                .collect();
            net.backward(&cache, &grad_soft);
            step += 1;
            let (b1, b2, eps) = (0.9, 0.999, 1e-8);
            let mut i = 0;
            net.visit_params("", &mut |_, p| {
                for (v, g) in p.value.iter_mut().zip(&p.grad) {
                    m1[i] = b1 * m1[i] + (1.0 - b1) * g;
                    m2[i] = b2 * m2[i] + (1.0 - b2) * g * g;
                    let mh = m1[i] / (1.0 - f64::powi(b1, step));
                    let vh = m2[i] / (1.0 - f64::powi(b2, step));
                    *v -= lr * mh / (vh.sqrt() + eps);
                    i += 1;
                }
            });
            // Keep the best noise-free pattern seen so far; the stochastic
            // gate chatters around the threshold, so the training output is
            // the best-checkpoint pattern, not the last iterate.
            let (clean, _) = net.forward(&feats, &vec![0.0; k]);
            achieved = achieved.min(pattern_loss(&clean.hard));
        }
        assert!(
            achieved <= best * 1.05 + 1e-9,
            "achieved {achieved} vs optimum {best}"
        );
    }
}
