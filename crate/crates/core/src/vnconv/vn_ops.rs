use rand::Rng;

use crate::nn::{join, Module, Param};
use crate::Vec3;

use super::VnFeature;

/// Equivariant linear mix of channel vectors: `out_c = sum_c' W[c][c'] v_c'`.
#[derive(Debug, Clone)]
pub struct VnLinear {
    pub c_in: usize,
    pub c_out: usize,
    pub w: Param,
}

impl VnLinear {
    pub fn new(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let scale = (1.0 / c_in as f64).sqrt();
        VnLinear {
            c_in,
            c_out,
            w: Param::init(&[c_out, c_in], rng, scale),
        }
    }

    pub fn forward(&self, v: &VnFeature) -> VnFeature {
        assert_eq!(v.channels, self.c_in);
        let mut out = VnFeature::zeros(v.points, self.c_out);
        for p in 0..v.points {
            for co in 0..self.c_out {
                let mut acc = Vec3::zeros();
                for ci in 0..self.c_in {
                    acc += v.at(p, ci) * self.w.value[co * self.c_in + ci];
                }
                *out.at_mut(p, co) = acc;
            }
        }
        out
    }

    pub fn backward(&mut self, input: &VnFeature, grad_out: &VnFeature) -> VnFeature {
        let mut grad_in = VnFeature::zeros(input.points, self.c_in);
        for p in 0..input.points {
            for co in 0..self.c_out {
                let g = grad_out.at(p, co);
                for ci in 0..self.c_in {
                    self.w.grad[co * self.c_in + ci] += g.dot(input.at(p, ci));
                    *grad_in.at_mut(p, ci) += g * self.w.value[co * self.c_in + ci];
                }
            }
        }
        grad_in
    }
}

impl Module for VnLinear {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "w"), &mut self.w);
    }
}

/// Vector-neuron ReLU: each channel vector keeps its component along a
/// learned direction only when the inner product is non-negative,
/// otherwise the projection onto that direction is removed.
#[derive(Debug, Clone)]
pub struct VnRelu {
    pub channels: usize,
    /// Direction-mixing weights, `[C, C]`: `k_c = sum_c' mix[c][c'] v_c'`.
    pub mix: Param,
}

pub struct VnReluCache {
    /// Learned direction per (point, channel) before normalization.
    k: Vec<Vec3>,
    /// True where the input passed through unchanged.
    pass: Vec<bool>,
}

const K_FLOOR: f64 = 1e-12;

impl VnRelu {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        let scale = (1.0 / channels as f64).sqrt();
        VnRelu {
            channels,
            mix: Param::init(&[channels, channels], rng, scale),
        }
    }

    pub fn forward(&self, v: &VnFeature) -> (VnFeature, VnReluCache) {
        assert_eq!(v.channels, self.channels);
        let c_n = self.channels;
        let mut out = VnFeature::zeros(v.points, c_n);
        let mut cache = VnReluCache {
            k: vec![Vec3::zeros(); v.points * c_n],
            pass: vec![true; v.points * c_n],
        };
        for p in 0..v.points {
            for c in 0..c_n {
                let mut k = Vec3::zeros();
                for ci in 0..c_n {
                    k += v.at(p, ci) * self.mix.value[c * c_n + ci];
                }
                cache.k[p * c_n + c] = k;
                let vv = *v.at(p, c);
                let kn = k.norm();
                if kn < K_FLOOR || vv.dot(&k) >= 0.0 {
                    *out.at_mut(p, c) = vv;
                } else {
                    let n = k / kn;
                    *out.at_mut(p, c) = vv - n * vv.dot(&n);
                    cache.pass[p * c_n + c] = false;
                }
            }
        }
        (out, cache)
    }

    pub fn backward(
        &mut self,
        input: &VnFeature,
        cache: &VnReluCache,
        grad_out: &VnFeature,
    ) -> VnFeature {
        let c_n = self.channels;
        let mut grad_in = VnFeature::zeros(input.points, c_n);
        for p in 0..input.points {
            for c in 0..c_n {
                let g = *grad_out.at(p, c);
                if cache.pass[p * c_n + c] {
                    *grad_in.at_mut(p, c) += g;
                    continue;
                }
                let k = cache.k[p * c_n + c];
                let kn = k.norm();
                let n = k / kn;
                let vv = *input.at(p, c);
                // Direct term: (I - n n^T) g.
                *grad_in.at_mut(p, c) += g - n * g.dot(&n);
                // Through the direction: dL/dn = -(g.n) v - (v.n) g,
                // dL/dk = (I - n n^T) dL/dn / |k|.
                let dn = -(vv * g.dot(&n)) - g * vv.dot(&n);
                let dk = (dn - n * dn.dot(&n)) / kn;
                for ci in 0..c_n {
                    self.mix.grad[c * c_n + ci] += dk.dot(input.at(p, ci));
                    *grad_in.at_mut(p, ci) += dk * self.mix.value[c * c_n + ci];
                }
            }
        }
        grad_in
    }
}

impl Module for VnRelu {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "mix"), &mut self.mix);
    }
}

/// Rotation-invariant readout: scalar `c` is `<v_c, mean_dir>` with
/// `mean_dir` the normalized channel mean. A zero mean yields zeros.
pub fn vn_invariant_readout(v: &VnFeature) -> Vec<Vec<f64>> {
    (0..v.points)
        .map(|p| {
            let chans = v.point(p);
            let mean: Vec3 = chans.iter().sum::<Vec3>() / chans.len() as f64;
            let mn = mean.norm();
            if mn < 1e-12 {
                vec![0.0; chans.len()]
            } else {
                let n = mean / mn;
                chans.iter().map(|c| c.dot(&n)).collect()
            }
        })
        .collect()
}

/// Backward of [`vn_invariant_readout`]: maps per-point scalar gradients to
/// feature gradients (the readout has no parameters).
pub fn vn_readout_backward(v: &VnFeature, grad_out: &[Vec<f64>]) -> VnFeature {
    let mut grad = VnFeature::zeros(v.points, v.channels);
    let c_n = v.channels as f64;
    for p in 0..v.points {
        let chans = v.point(p);
        let mean: Vec3 = chans.iter().sum::<Vec3>() / c_n;
        let mn = mean.norm();
        if mn < 1e-12 {
            continue;
        }
        let n = mean / mn;
        let weighted: Vec3 = chans
            .iter()
            .zip(&grad_out[p])
            .map(|(vc, g)| vc * *g)
            .sum();
        // (I - n n^T) / (|m| C) applied to the weighted sum.
        let shared = (weighted - n * weighted.dot(&n)) / (mn * c_n);
        for c in 0..v.channels {
            *grad.at_mut(p, c) += n * grad_out[p][c] + shared;
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom3::Rotation;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn rand_feature(rng: &mut StdRng, points: usize, channels: usize) -> VnFeature {
        use rand::Rng;
        let mut f = VnFeature::zeros(points, channels);
        for p in 0..points {
            for c in 0..channels {
                *f.at_mut(p, c) =
                    Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            }
        }
        f
    }

    #[test]
    fn relu_passes_positive_side() {
        let mut rng = StdRng::seed_from_u64(1);
        let mut relu = VnRelu::new(1, &mut rng);
        relu.mix.value = vec![1.0];
        let mut v = VnFeature::zeros(1, 1);
        *v.at_mut(0, 0) = Vec3::new(0.3, 0.4, 0.5);
        // k = v itself, dot > 0 -> unchanged.
        let (out, _) = relu.forward(&v);
        assert_eq!(*out.at(0, 0), Vec3::new(0.3, 0.4, 0.5));
    }

    #[test]
    fn relu_projects_out_negative_component() {
        let mut rng = StdRng::seed_from_u64(1);
        let mut relu = VnRelu::new(2, &mut rng);
        // k_0 = v_1 so the first channel is judged against the second.
        relu.mix.value = vec![0.0, 1.0, 0.0, 0.0];
        let mut v = VnFeature::zeros(1, 2);
        *v.at_mut(0, 0) = Vec3::new(-1.0, 0.0, 0.0);
        *v.at_mut(0, 1) = Vec3::new(1.0, 0.0, 0.0);
        // v_0 = -k: full projection removed -> zero.
        let (out, _) = relu.forward(&v);
        assert!(out.at(0, 0).norm() < 1e-15);
    }

    #[test]
    fn relu_output_dot_k_is_nonnegative() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..50 {
            let relu = VnRelu::new(3, &mut rng);
            let v = rand_feature(&mut rng, 4, 3);
            let (out, cache) = relu.forward(&v);
            for p in 0..4 {
                for c in 0..3 {
                    let k = cache.k[p * 3 + c];
                    assert!(out.at(p, c).dot(&k) >= -1e-12);
                }
            }
        }
    }

    #[test]
    fn relu_is_equivariant() {
        let mut rng = StdRng::seed_from_u64(6);
        let relu = VnRelu::new(4, &mut rng);
        let v = rand_feature(&mut rng, 5, 4);
        let r = Rotation::from_axis_angle(&Vec3::new(0.3, -0.5, 0.8), 1.1).as_matrix();
        let (out, _) = relu.forward(&v);
        let (out_rot, _) = relu.forward(&v.rotated(&r));
        assert!(out_rot.max_abs_diff(&out.rotated(&r)) < 1e-12);
    }

    #[test]
    fn relu_gradients_match_finite_differences() {
        use rand::Rng;
        let mut rng = StdRng::seed_from_u64(7);
        let mut relu = VnRelu::new(3, &mut rng);
        let v = rand_feature(&mut rng, 4, 3);
        let w: Vec<f64> = (0..4 * 3 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss_of = |relu: &VnRelu, v: &VnFeature| -> f64 {
            let (out, _) = relu.forward(v);
            let mut l = 0.0;
            for p in 0..4 {
                for c in 0..3 {
                    for i in 0..3 {
                        l += out.at(p, c)[i] * w[(p * 3 + c) * 3 + i];
                    }
                }
            }
            l
        };
        relu.zero_grad();
        let (out, cache) = relu.forward(&v);
        let mut g = VnFeature::zeros(out.points, out.channels);
        for p in 0..4 {
            for c in 0..3 {
                *g.at_mut(p, c) = Vec3::new(
                    w[(p * 3 + c) * 3],
                    w[(p * 3 + c) * 3 + 1],
                    w[(p * 3 + c) * 3 + 2],
                );
            }
        }
        let grad_in = relu.backward(&v, &cache, &g);
        let h = 1e-6;
        for idx in 0..relu.mix.len() {
            let analytic = relu.mix.grad[idx];
            relu.mix.value[idx] += h;
            let lp = loss_of(&relu, &v);
            relu.mix.value[idx] -= 2.0 * h;
            let lm = loss_of(&relu, &v);
            relu.mix.value[idx] += h;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - analytic).abs() < 1e-5 * (1.0 + fd.abs()), "mix[{idx}]");
        }
        for p in 0..4 {
            for c in 0..3 {
                for i in 0..3 {
                    let mut vp = v.clone();
                    vp.at_mut(p, c)[i] += h;
                    let lp = loss_of(&relu, &vp);
                    vp.at_mut(p, c)[i] -= 2.0 * h;
                    let lm = loss_of(&relu, &vp);
                    let fd = (lp - lm) / (2.0 * h);
                    let analytic = grad_in.at(p, c)[i];
                    assert!(
                        (fd - analytic).abs() < 1e-5 * (1.0 + fd.abs()),
                        "v[{p}][{c}][{i}] fd {fd} analytic {analytic}"
                    );
                }
            }
        }
    }

    #[test]
    fn readout_all_channels_equal_unit_vector() {
        let mut v = VnFeature::zeros(2, 3);
        let u = Vec3::new(0.0, 0.0, 1.0);
        for p in 0..2 {
            for c in 0..3 {
                *v.at_mut(p, c) = u;
            }
        }
        let out = vn_invariant_readout(&v);
        for row in out {
            for s in row {
                assert!((s - 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn readout_invariant_under_rotation() {
        let mut rng = StdRng::seed_from_u64(9);
        let v = rand_feature(&mut rng, 6, 4);
        let out = vn_invariant_readout(&v);
        for _ in 0..5 {
            use rand::Rng;
            let r = Rotation::from_axis_angle(
                &Vec3::new(rng.gen(), rng.gen(), rng.gen::<f64>() + 0.1),
                rng.gen_range(-3.0..3.0),
            )
            .as_matrix();
            let out_rot = vn_invariant_readout(&v.rotated(&r));
            for (a, b) in out.iter().flatten().zip(out_rot.iter().flatten()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn readout_backward_matches_finite_differences() {
        use rand::Rng;
        let mut rng = StdRng::seed_from_u64(10);
        let v = rand_feature(&mut rng, 3, 4);
        let w: Vec<f64> = (0..3 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss_of = |v: &VnFeature| -> f64 {
            vn_invariant_readout(v)
                .iter()
                .flatten()
                .zip(&w)
                .map(|(s, wi)| s * wi)
                .sum()
        };
        let grads: Vec<Vec<f64>> = (0..3).map(|p| w[p * 4..(p + 1) * 4].to_vec()).collect();
        let analytic = vn_readout_backward(&v, &grads);
        let h = 1e-6;
        for p in 0..3 {
            for c in 0..4 {
                for i in 0..3 {
                    let mut vp = v.clone();
                    vp.at_mut(p, c)[i] += h;
                    let lp = loss_of(&vp);
                    vp.at_mut(p, c)[i] -= 2.0 * h;
                    let lm = loss_of(&vp);
                    let fd = (lp - lm) / (2.0 * h);
                    assert!((fd - analytic.at(p, c)[i]).abs() < 1e-6 * (1.0 + fd.abs()));
                }
            }
        }
    }

    #[test]
    fn linear_gradcheck() {
        use rand::Rng;
        let mut rng = StdRng::seed_from_u64(12);
        let mut lin = VnLinear::new(3, 2, &mut rng);
        let v = rand_feature(&mut rng, 3, 3);
        let w: Vec<f64> = (0..3 * 2 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss_of = |lin: &VnLinear, v: &VnFeature| -> f64 {
            let out = lin.forward(v);
            let mut l = 0.0;
            for p in 0..3 {
                for c in 0..2 {
                    for i in 0..3 {
                        l += out.at(p, c)[i] * w[(p * 2 + c) * 3 + i];
                    }
                }
            }
            l
        };
        lin.zero_grad();
        let out = lin.forward(&v);
        let mut g = VnFeature::zeros(out.points, out.channels);
        for p in 0..3 {
            for c in 0..2 {
                *g.at_mut(p, c) =
                    Vec3::new(w[(p * 2 + c) * 3], w[(p * 2 + c) * 3 + 1], w[(p * 2 + c) * 3 + 2]);
            }
        }
        let grad_in = lin.backward(&v, &g);
        let h = 1e-6;
        for idx in 0..lin.w.len() {
            let analytic = lin.w.grad[idx];
            lin.w.value[idx] += h;
            let lp = loss_of(&lin, &v);
            lin.w.value[idx] -= 2.0 * h;
            let lm = loss_of(&lin, &v);
            lin.w.value[idx] += h;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - analytic).abs() < 1e-6 * (1.0 + fd.abs()));
        }
        for p in 0..3 {
            for c in 0..3 {
                for i in 0..3 {
                    let mut vp = v.clone();
                    vp.at_mut(p, c)[i] += h;
                    let lp = loss_of(&lin, &vp);
                    vp.at_mut(p, c)[i] -= 2.0 * h;
                    let lm = loss_of(&lin, &vp);
                    let fd = (lp - lm) / (2.0 * h);
                    assert!((fd - grad_in.at(p, c)[i]).abs() < 1e-6 * (1.0 + fd.abs()));
                }
            }
        }
    }
}
