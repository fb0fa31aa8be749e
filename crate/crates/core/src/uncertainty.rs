//! Anisotropic-Gaussian uncertainty: the scalar and anisotropic
//! adversarial losses, pseudo-ground-truth labeling, and voxel voting.

use rand::Rng;
use thiserror::Error;

use crate::voxel::{bounding_box, LabelGrid, VoxelGrid};
use crate::{Mat3, Rotation, Vec3};

#[derive(Debug, Error)]
pub enum UncertaintyError {
    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("scale {0} below the singularity floor 1e-8")]
    SingularScale(f64),
    #[error("threshold must be positive, got {0}")]
    NonPositiveThreshold(f64),
    #[error("empty point cloud")]
    EmptyCloud,
}

/// Per-point anisotropic uncertainty: mean, orientation, and positive
/// axis scales. The covariance is `R S S^T R^T` with `S = diag(scales)`.
#[derive(Debug, Clone, Copy)]
pub struct AnisoGaussian {
    pub mean: Vec3,
    pub rot: Rotation,
    pub scales: Vec3,
}

impl AnisoGaussian {
    pub fn isotropic(mean: Vec3, sigma: f64) -> Self {
        AnisoGaussian {
            mean,
            rot: Rotation::identity(),
            scales: Vec3::repeat(sigma),
        }
    }

    /// Build from raw network outputs: unnormalized quaternion and
    /// log-scales.
    pub fn from_raw(mean: Vec3, quat_raw: &[f64; 4], log_scales: &[f64; 3]) -> Self {
        AnisoGaussian {
            mean,
            rot: Rotation::from_wxyz(quat_raw[0], quat_raw[1], quat_raw[2], quat_raw[3]),
            scales: Vec3::new(log_scales[0].exp(), log_scales[1].exp(), log_scales[2].exp()),
        }
    }

    pub fn covariance(&self) -> Mat3 {
        let r = self.rot.as_matrix();
        let s2 = Mat3::from_diagonal(&self.scales.component_mul(&self.scales));
        r * s2 * r.transpose()
    }

    pub fn trace_sst(&self) -> f64 {
        self.scales.norm_squared()
    }
}

/// Eq.-4-style scalar adversarial loss: `||x - x_hat||^2 / sigma^2 + log sigma^2`.
pub fn loss_adv_scalar(x: &Vec3, x_hat: &Vec3, sigma: f64) -> Result<f64, UncertaintyError> {
    if sigma <= 0.0 {
        return Err(UncertaintyError::NonPositiveSigma(sigma));
    }
    let s2 = sigma * sigma;
    Ok((x - x_hat).norm_squared() / s2 + s2.ln())
}

fn check_scales(g: &AnisoGaussian) -> Result<(), UncertaintyError> {
    for i in 0..3 {
        if g.scales[i] < 1e-8 {
            return Err(UncertaintyError::SingularScale(g.scales[i]));
        }
    }
    Ok(())
}

/// Anisotropic adversarial loss:
/// `(x - x_hat)^T Sigma^-1 (x - x_hat) + ln|Sigma| + tr(Sigma^-1)`.
pub fn loss_adv_aniso(x: &Vec3, x_hat: &Vec3, g: &AnisoGaussian) -> Result<f64, UncertaintyError> {
    check_scales(g)?;
    let a = g.rot.as_matrix().transpose() * (x - x_hat);
    let mut loss = 0.0;
    for i in 0..3 {
        let s2 = g.scales[i] * g.scales[i];
        loss += a[i] * a[i] / s2 + s2.ln() + 1.0 / s2;
    }
    Ok(loss)
}

/// Derivative of the unit-quaternion rotation matrix w.r.t. one unit
/// quaternion component (w, x, y, z order).
fn rotation_matrix_jacobian(q: &[f64; 4]) -> [Mat3; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        Mat3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0,
        Mat3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0,
        Mat3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0,
        Mat3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0,
    ]
}

/// Analytic gradients of [`loss_adv_aniso`] in the raw parameterization the
/// uncertainty head emits: predicted coordinate `x`, unnormalized
/// quaternion, and log-scales.
pub fn loss_adv_aniso_grad(
    x: &Vec3,
    x_hat: &Vec3,
    quat_raw: &[f64; 4],
    log_scales: &[f64; 3],
) -> Result<(f64, Vec3, [f64; 4], [f64; 3]), UncertaintyError> {
    let g = AnisoGaussian::from_raw(*x, quat_raw, log_scales);
    let loss = loss_adv_aniso(x, x_hat, &g)?;

    let qnorm = (quat_raw.iter().map(|v| v * v).sum::<f64>()).sqrt();
    let qu = [
        quat_raw[0] / qnorm,
        quat_raw[1] / qnorm,
        quat_raw[2] / qnorm,
        quat_raw[3] / qnorm,
    ];
    let r = {
        // R from the normalized quaternion; matches the jacobian formula.
        Rotation::from_wxyz(qu[0], qu[1], qu[2], qu[3]).as_matrix()
    };
    let diff = x - x_hat;
    let a = r.transpose() * diff;
    let s = Vec3::new(log_scales[0].exp(), log_scales[1].exp(), log_scales[2].exp());

    // d/dx = 2 Sigma^-1 (x - x_hat).
    let inv_s2 = Vec3::new(1.0 / (s.x * s.x), 1.0 / (s.y * s.y), 1.0 / (s.z * s.z));
    let grad_x = r * Vec3::new(a.x * inv_s2.x, a.y * inv_s2.y, a.z * inv_s2.z) * 2.0;

    // d/dz_i with s_i = exp(z_i): -2 a_i^2 / s_i^2 + 2 - 2 / s_i^2.
    let mut grad_z = [0.0; 3];
    for i in 0..3 {
        grad_z[i] = -2.0 * a[i] * a[i] * inv_s2[i] + 2.0 - 2.0 * inv_s2[i];
    }

    // dL/dR = diff * c^T with c_i = 2 a_i / s_i^2 (from a = R^T diff).
    let c = Vec3::new(2.0 * a.x * inv_s2.x, 2.0 * a.y * inv_s2.y, 2.0 * a.z * inv_s2.z);
    let dl_dr = diff * c.transpose();
    let jac = rotation_matrix_jacobian(&qu);
    let mut grad_qu = [0.0; 4];
    for k in 0..4 {
        grad_qu[k] = dl_dr.component_mul(&jac[k]).sum();
    }
    // Through the normalization: (I - u u^T) / |q_raw|.
    let dot: f64 = grad_qu.iter().zip(&qu).map(|(g, u)| g * u).sum();
    let mut grad_q = [0.0; 4];
    for k in 0..4 {
        grad_q[k] = (grad_qu[k] - dot * qu[k]) / qnorm;
    }
    Ok((loss, grad_x, grad_q, grad_z))
}

/// Pseudo-ground-truth label for one sample location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintyLabel {
    pub location: Vec3,
    pub positive: bool,
    pub trace_sst: f64,
}

/// Label a sample positive when `tr(S S^T) < omega` (ties negative).
pub fn label_point(
    location: Vec3,
    g: &AnisoGaussian,
    omega: f64,
) -> Result<UncertaintyLabel, UncertaintyError> {
    if omega <= 0.0 {
        return Err(UncertaintyError::NonPositiveThreshold(omega));
    }
    let trace_sst = g.trace_sst();
    Ok(UncertaintyLabel {
        location,
        positive: trace_sst < omega,
        trace_sst,
    })
}

/// Majority vote of the sample labels inside each voxel; empty cells and
/// exact ties resolve to negative.
pub fn voxel_vote<T: Clone + Default>(
    samples: &[UncertaintyLabel],
    grid: &VoxelGrid<T>,
) -> LabelGrid {
    let mut pos = vec![0usize; grid.len()];
    let mut neg = vec![0usize; grid.len()];
    for s in samples {
        if let Some(idx) = grid.cell_of(&s.location) {
            if s.positive {
                pos[idx] += 1;
            } else {
                neg[idx] += 1;
            }
        }
    }
    let values = pos
        .iter()
        .zip(&neg)
        .map(|(&p, &n)| p > n)
        .collect();
    grid.with_values(values)
}

/// Uniform i.i.d. samples in the cube centered on the cloud's bounding-box
/// center with side twice the bounding-box diagonal.
pub fn dense_cube_samples(
    cloud: &[Vec3],
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec3>, UncertaintyError> {
    if cloud.is_empty() {
        return Err(UncertaintyError::EmptyCloud);
    }
    let (lo, hi) = bounding_box(cloud);
    let center = (lo + hi) * 0.5;
    let side = 2.0 * (hi - lo).norm();
    let half = side * 0.5;
    Ok((0..count)
        .map(|_| {
            Vec3::new(
                center.x + rng.gen_range(-half..half),
                center.y + rng.gen_range(-half..half),
                center.z + rng.gen_range(-half..half),
            )
        })
        .collect())
}
