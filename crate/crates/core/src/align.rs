//! Pose recovery from predicted canonical coordinates: similarity Umeyama,
//! an anisotropic-uncertainty-weighted refinement, and pose-error metrics.

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::geom3::{skew, svd3};
use crate::uncertainty::AnisoGaussian;
use crate::{Mat3, RigidTransform, Rotation, Vec3};

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("alignment needs at least 3 correspondences, got {0}")]
    TooFewPoints(usize),
    #[error("source and target have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("cross-covariance is rank deficient (collinear correspondences)")]
    RankDeficient,
    #[error("scale {0} below the singularity floor 1e-8")]
    SingularScale(f64),
    #[error("refinement did not converge in {iterations} iterations")]
    NoConvergence {
        iterations: usize,
        best: Box<PoseEstimate>,
    },
}

/// Recovered similarity transform with its unweighted RMS residual.
#[derive(Debug, Clone)]
pub struct PoseEstimate {
    pub transform: RigidTransform,
    pub residual: f64,
    pub iterations: usize,
}

fn rms_residual(src: &[Vec3], dst: &[Vec3], t: &RigidTransform) -> f64 {
    let ss: f64 = src
        .iter()
        .zip(dst)
        .map(|(s, d)| (t.apply(s) - d).norm_squared())
        .sum();
    (ss / src.len() as f64).sqrt()
}

/// Weighted least-squares similarity alignment,
/// `argmin sum w_i || s R src_i + t - dst_i ||^2`, with the determinant
/// correction that keeps the rotation proper.
pub fn umeyama_weighted(
    src: &[Vec3],
    dst: &[Vec3],
    weights: &[f64],
    with_scale: bool,
) -> Result<PoseEstimate, AlignError> {
    if src.len() != dst.len() {
        return Err(AlignError::LengthMismatch(src.len(), dst.len()));
    }
    if src.len() < 3 {
        return Err(AlignError::TooFewPoints(src.len()));
    }
    assert_eq!(weights.len(), src.len());
    let wsum: f64 = weights.iter().sum();
    let mu_s: Vec3 = src.iter().zip(weights).map(|(p, w)| p * *w).sum::<Vec3>() / wsum;
    let mu_d: Vec3 = dst.iter().zip(weights).map(|(p, w)| p * *w).sum::<Vec3>() / wsum;
    let mut h = Mat3::zeros();
    let mut var_s = 0.0;
    for ((s, d), &w) in src.iter().zip(dst).zip(weights) {
        let cs = s - mu_s;
        let cd = d - mu_d;
        h += (cd * cs.transpose()) * w;
        var_s += w * cs.norm_squared();
    }
    h /= wsum;
    var_s /= wsum;
    let (u0, sing0, v0) = svd3(&h).map_err(|_| AlignError::RankDeficient)?;
    // Order singular values descending; the determinant correction flips
    // the weakest direction.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sing0[b].partial_cmp(&sing0[a]).unwrap());
    let mut u = Mat3::zeros();
    let mut v = Mat3::zeros();
    let mut sing = Vec3::zeros();
    for (k, &i) in order.iter().enumerate() {
        u.set_column(k, &u0.column(i));
        v.set_column(k, &v0.column(i));
        sing[k] = sing0[i];
    }
    if sing[1] <= 1e-12 * sing[0].max(1e-300) {
        return Err(AlignError::RankDeficient);
    }
    let det_sign = (u * v.transpose()).determinant().signum();
    let d = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, det_sign));
    let r = u * d * v.transpose();
    let scale = if with_scale {
        (sing[0] + sing[1] + det_sign * sing[2]) / var_s
    } else {
        1.0
    };
    let rotation = Rotation::from_matrix(&r);
    let translation = mu_d - r * mu_s * scale;
    let transform = RigidTransform {
        rotation,
        translation,
        scale,
    };
    Ok(PoseEstimate {
        residual: rms_residual(src, dst, &transform),
        transform,
        iterations: 0,
    })
}

/// Unweighted similarity alignment.
pub fn umeyama(src: &[Vec3], dst: &[Vec3], with_scale: bool) -> Result<PoseEstimate, AlignError> {
    umeyama_weighted(src, dst, &vec![1.0; src.len()], with_scale)
}

fn whitening(g: &AnisoGaussian) -> Result<Mat3, AlignError> {
    for i in 0..3 {
        if g.scales[i] < 1e-8 {
            return Err(AlignError::SingularScale(g.scales[i]));
        }
    }
    let rt = g.rot.as_matrix().transpose();
    Ok(Mat3::from_fn(|i, j| rt[(i, j)] / g.scales[i]))
}

fn weighted_objective(
    src: &[Vec3],
    dst: &[Vec3],
    whits: &[Mat3],
    t: &RigidTransform,
) -> f64 {
    src.iter()
        .zip(dst)
        .zip(whits)
        .map(|((s, d), w)| (w * (t.apply(s) - d)).norm_squared())
        .sum()
}

/// Anisotropic-uncertainty-weighted alignment,
/// `argmin sum (s R src_i + t - dst_i)^T Sigma_i^-1 (...)`. Initialized by
/// trace-weighted scalar Umeyama and refined by damped Gauss-Newton on
/// (rotation vector, translation, ln scale).
pub fn umeyama_aniso(
    src: &[Vec3],
    dst: &[Vec3],
    sigmas: &[AnisoGaussian],
) -> Result<PoseEstimate, AlignError> {
    if src.len() != dst.len() {
        return Err(AlignError::LengthMismatch(src.len(), dst.len()));
    }
    if src.len() < 3 {
        return Err(AlignError::TooFewPoints(src.len()));
    }
    assert_eq!(sigmas.len(), src.len());
    let whits: Vec<Mat3> = sigmas.iter().map(whitening).collect::<Result<_, _>>()?;
    let init_w: Vec<f64> = sigmas.iter().map(|g| 1.0 / g.trace_sst().max(1e-12)).collect();
    let init = umeyama_weighted(src, dst, &init_w, true)?;
    let mut cur = init.transform;
    let mut obj = weighted_objective(src, dst, &whits, &cur);
    let max_iters = 50;
    for iter in 0..max_iters {
        // Normal equations over the 7-dim perturbation [dr, dt, d ln s].
        let mut jtj = DMatrix::<f64>::zeros(7, 7);
        let mut jte = DMatrix::<f64>::zeros(7, 1);
        let r = cur.rotation.as_matrix();
        for ((s, d), w) in src.iter().zip(dst).zip(&whits) {
            let y = r * s * cur.scale;
            let e = w * (y + cur.translation - d);
            // Left perturbation R <- exp(dr^) R gives d(Rx) = -(Rx)^ dr.
            let ja = w * (-skew(&y));
            let jt = *w;
            let js = w * y;
            let mut j = DMatrix::<f64>::zeros(3, 7);
            for i in 0..3 {
                for k in 0..3 {
                    j[(i, k)] = ja[(i, k)];
                    j[(i, k + 3)] = jt[(i, k)];
                }
                j[(i, 6)] = js[i];
            }
            jtj += j.transpose() * &j;
            for i in 0..7 {
                jte[(i, 0)] += (0..3).map(|a| j[(a, i)] * e[a]).sum::<f64>();
            }
        }
        for i in 0..7 {
            jtj[(i, i)] += 1e-12;
        }
        let step = jtj
            .clone()
            .cholesky()
            .map(|c| c.solve(&jte))
            .unwrap_or_else(|| jtj.lu().solve(&jte).expect("regularized system solvable"));
        let step_norm = step.norm();
        // Backtracking: halve the step while the objective increases.
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=8 {
            let dr = Vec3::new(step[(0, 0)], step[(1, 0)], step[(2, 0)]) * -alpha;
            let dt = Vec3::new(step[(3, 0)], step[(4, 0)], step[(5, 0)]) * -alpha;
            let ds = -alpha * step[(6, 0)];
            let cand = RigidTransform {
                rotation: Rotation::from_rotation_vector(&dr).compose(&cur.rotation),
                translation: cur.translation + dt,
                scale: cur.scale * ds.exp(),
            };
            let cand_obj = weighted_objective(src, dst, &whits, &cand);
            if cand_obj <= obj {
                accepted = Some((cand, cand_obj));
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((cand, cand_obj)) => {
                cur = cand;
                obj = cand_obj;
            }
            None => {
                // No descent direction left; treat as converged.
                return Ok(PoseEstimate {
                    residual: rms_residual(src, dst, &cur),
                    transform: cur,
                    iterations: iter,
                });
            }
        }
        if step_norm < 1e-10 {
            return Ok(PoseEstimate {
                residual: rms_residual(src, dst, &cur),
                transform: cur,
                iterations: iter + 1,
            });
        }
    }
    Err(AlignError::NoConvergence {
        iterations: max_iters,
        best: Box::new(PoseEstimate {
            residual: rms_residual(src, dst, &cur),
            transform: cur,
            iterations: max_iters,
        }),
    })
}

/// Geodesic rotation distance in degrees.
pub fn rotation_error_deg(r_est: &Mat3, r_gt: &Mat3) -> f64 {
    let c = ((r_gt * r_est.transpose()).trace() - 1.0) / 2.0;
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

/// One evaluated sample.
#[derive(Debug, Clone, Serialize)]
pub struct SampleError {
    pub id: String,
    pub rot_deg: f64,
    pub trans_m: f64,
}

/// Thresholds are (degrees, centimeters).
pub const DEFAULT_THRESHOLDS: [(f64, f64); 4] =
    [(5.0, 2.0), (5.0, 5.0), (10.0, 2.0), (10.0, 5.0)];

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub samples: Vec<SampleError>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

impl MetricsReport {
    pub fn mean_rotation_deg(&self) -> f64 {
        self.samples.iter().map(|s| s.rot_deg).sum::<f64>() / self.samples.len() as f64
    }

    pub fn mean_translation_m(&self) -> f64 {
        self.samples.iter().map(|s| s.trans_m).sum::<f64>() / self.samples.len() as f64
    }

    pub fn median_rotation_deg(&self) -> f64 {
        median(&mut self.samples.iter().map(|s| s.rot_deg).collect::<Vec<_>>())
    }

    pub fn median_translation_m(&self) -> f64 {
        median(&mut self.samples.iter().map(|s| s.trans_m).collect::<Vec<_>>())
    }

    /// Fraction of samples with both errors under each (deg, cm) threshold.
    pub fn precision_table(&self, thresholds: &[(f64, f64)]) -> Result<Vec<f64>, AlignError> {
        if self.samples.is_empty() {
            return Err(AlignError::TooFewPoints(0));
        }
        Ok(thresholds
            .iter()
            .map(|&(deg, cm)| {
                let hits = self
                    .samples
                    .iter()
                    .filter(|s| s.rot_deg < deg && s.trans_m * 100.0 < cm)
                    .count();
                hits as f64 / self.samples.len() as f64
            })
            .collect())
    }

    /// One row per sample followed by a summary block.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,rot_err_deg,trans_err_m\n");
        for s in &self.samples {
            out.push_str(&format!("{},{:.6},{:.6}\n", s.id, s.rot_deg, s.trans_m));
        }
        if !self.samples.is_empty() {
            out.push_str(&format!(
                "#mean,{:.6},{:.6}\n#median,{:.6},{:.6}\n",
                self.mean_rotation_deg(),
                self.mean_translation_m(),
                self.median_rotation_deg(),
                self.median_translation_m()
            ));
            if let Ok(prec) = self.precision_table(&DEFAULT_THRESHOLDS) {
                for ((deg, cm), p) in DEFAULT_THRESHOLDS.iter().zip(prec) {
                    out.push_str(&format!("#precision_{deg}deg_{cm}cm,{p:.6},\n"));
                }
            }
        }
        out
    }

    pub fn to_json_summary(&self) -> serde_json::Value {
        let prec = self.precision_table(&DEFAULT_THRESHOLDS).unwrap_or_default();
        let table: serde_json::Map<String, serde_json::Value> = DEFAULT_THRESHOLDS
            .iter()
            .zip(&prec)
            .map(|((deg, cm), p)| (format!("{deg}deg_{cm}cm"), serde_json::json!(p)))
            .collect();
        serde_json::json!({
            "n_samples": self.samples.len(),
            "mean_rotation_deg": self.mean_rotation_deg(),
            "mean_translation_m": self.mean_translation_m(),
            "median_rotation_deg": self.median_rotation_deg(),
            "median_translation_m": self.median_translation_m(),
            "precision": table,
        })
    }
}
