use rand::Rng;

use crate::nn::{join, Module, Param};
use crate::{Mat3, RotationGroup, Vec3};

use super::{ReceptiveField, VnError, VnFeature};

/// Fixed unit vector the invariant convolution scalar is lifted along
/// before rotation by the activated group element.
pub const LIFT_DIR: [f64; 3] = [
    0.577_350_269_189_625_8,
    0.577_350_269_189_625_8,
    0.577_350_269_189_625_8,
];

/// Supports within this distance of the origin contribute nothing; the
/// similarity normalizes by the support length.
const DEGENERATE_SUPPORT: f64 = 1e-6;

/// Similarity between a point feature and a rotated kernel support:
/// `<f, w> * cos(angle(d, k))`, with `<,>` the sum of per-channel inner
/// products. `w_uq` and `k_uq` are the already-rotated weight and support.
pub fn sim(f_m: &[Vec3], w_uq: &[Vec3], d_mn: &Vec3, k_uq: &Vec3) -> Result<f64, VnError> {
    let dn = d_mn.norm();
    let kn = k_uq.norm();
    if dn < 1e-12 || kn < 1e-12 {
        return Err(VnError::ZeroDirection);
    }
    let feat: f64 = f_m.iter().zip(w_uq).map(|(f, w)| f.dot(w)).sum();
    Ok(feat * d_mn.dot(k_uq) / (dn * kn))
}

/// One SO(3)-equivariant graph convolution layer.
///
/// The kernel has a fixed center `k0` at the origin plus `n_supports`
/// learnable supports; weights are per output channel.
#[derive(Debug, Clone)]
pub struct ConvKernel {
    pub c_in: usize,
    pub c_out: usize,
    pub n_supports: usize,
    /// Learnable support points, `[U, 3]`. The center is implicit.
    pub supports: Param,
    /// Center weights, `[c_out, c_in, 3]`.
    pub center_w: Param,
    /// Support weights, `[c_out, U, c_in, 3]`.
    pub support_w: Param,
    /// Rotate the center weight by the activated rotation before the inner
    /// product, keeping the scalar invariant for equivariant features.
    pub center_rotate: bool,
}

pub type GConvLayer = ConvKernel;

/// Discrete argmax choices and scalars retained for the backward pass.
pub struct GConvCache {
    /// Activated group index per (point, out-channel).
    pub q_idx: Vec<usize>,
    /// Winning neighbor slot per (point, out-channel, support);
    /// `u32::MAX` marks a support with no contribution.
    pub m_star: Vec<u32>,
    /// Convolution scalar per (point, out-channel).
    pub scalar: Vec<f64>,
}

/// Icosahedron vertex directions (unnormalized (0, ±1, ±phi) cycle).
fn icosahedron_vertices() -> Vec<Vec3> {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut v = Vec::new();
    for s1 in [-1.0, 1.0] {
        for s2 in [-1.0, 1.0] {
            v.push(Vec3::new(0.0, s1, s2 * phi));
            v.push(Vec3::new(s1, s2 * phi, 0.0));
            v.push(Vec3::new(s1 * phi, 0.0, s2));
        }
    }
    v.iter().map(|x| x.normalize()).collect()
}

impl ConvKernel {
    /// `radius` scales the initial support point shell; supports stay
    /// learnable afterwards.
    pub fn new(
        c_in: usize,
        c_out: usize,
        n_supports: usize,
        radius: f64,
        center_rotate: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let mut supports = Param::zeros(&[n_supports, 3]);
        let verts = icosahedron_vertices();
        for u in 0..n_supports {
            let dir = if u < verts.len() {
                verts[u]
            } else {
                // Extra supports beyond the 12 vertices: one pole, then a
                // deterministic spiral.
                if u == verts.len() {
                    Vec3::new(0.0, 0.0, 1.0)
                } else {
                    let t = u as f64 * 2.399_963_229_728_653;
                    Vec3::new(t.cos(), t.sin(), (u as f64 * 0.37).sin()).normalize()
                }
            };
            let p = dir * radius;
            supports.value[u * 3..u * 3 + 3].copy_from_slice(&[p.x, p.y, p.z]);
        }
        let wscale = 1.0 / ((c_in * 3) as f64).sqrt();
        ConvKernel {
            c_in,
            c_out,
            n_supports,
            supports,
            center_w: Param::init(&[c_out, c_in, 3], rng, wscale),
            support_w: Param::init(&[c_out, n_supports, c_in, 3], rng, wscale),
            center_rotate,
        }
    }

    #[inline]
    fn support_vec(&self, u: usize) -> Vec3 {
        Vec3::new(
            self.supports.value[u * 3],
            self.supports.value[u * 3 + 1],
            self.supports.value[u * 3 + 2],
        )
    }

    #[inline]
    fn center_w_vec(&self, cout: usize, cin: usize) -> Vec3 {
        let o = (cout * self.c_in + cin) * 3;
        Vec3::new(
            self.center_w.value[o],
            self.center_w.value[o + 1],
            self.center_w.value[o + 2],
        )
    }

    #[inline]
    fn support_w_vec(&self, cout: usize, u: usize, cin: usize) -> Vec3 {
        let o = ((cout * self.n_supports + u) * self.c_in + cin) * 3;
        Vec3::new(
            self.support_w.value[o],
            self.support_w.value[o + 1],
            self.support_w.value[o + 2],
        )
    }

    /// Forward convolution over all points.
    ///
    /// Per point and output channel the scalar is
    /// `<f(p_n), w(k0)> + Theta`, lifted along [`LIFT_DIR`] and rotated by
    /// the activated group rotation.
    pub fn forward(
        &self,
        feats: &VnFeature,
        rf: &ReceptiveField,
        group: &RotationGroup,
    ) -> Result<(VnFeature, GConvCache), VnError> {
        if feats.channels != self.c_in {
            return Err(VnError::ChannelMismatch {
                expected: self.c_in,
                got: feats.channels,
            });
        }
        let n_points = feats.points;
        let n_q = group.len();
        let rots: Vec<Mat3> = group.elements.iter().map(|r| r.as_matrix()).collect();
        let u0 = Vec3::new(LIFT_DIR[0], LIFT_DIR[1], LIFT_DIR[2]);

        // Per-support geometry shared across output channels.
        let mut unit_supports = Vec::with_capacity(self.n_supports);
        let mut live = Vec::with_capacity(self.n_supports);
        for u in 0..self.n_supports {
            let k = self.support_vec(u);
            let n = k.norm();
            live.push(n >= DEGENERATE_SUPPORT);
            unit_supports.push(if n >= DEGENERATE_SUPPORT {
                k / n
            } else {
                Vec3::zeros()
            });
        }
        // b[q][u] = R_q * unit support.
        let b: Vec<Vec<Vec3>> = rots
            .iter()
            .map(|r| unit_supports.iter().map(|k| r * k).collect())
            .collect();

        let mut out = VnFeature::zeros(n_points, self.c_out);
        let mut cache = GConvCache {
            q_idx: vec![0; n_points * self.c_out],
            m_star: vec![u32::MAX; n_points * self.c_out * self.n_supports],
            scalar: vec![0.0; n_points * self.c_out],
        };

        let mut a_mats = vec![Mat3::zeros(); n_points * self.n_supports];
        let mut a0_mats = vec![Mat3::zeros(); n_points];
        for cout in 0..self.c_out {
            // Frobenius coefficient matrices: frob(R, A) == <f, R w>.
            for m in 0..n_points {
                let f = feats.point(m);
                for u in 0..self.n_supports {
                    let mut a = Mat3::zeros();
                    if live[u] {
                        for cin in 0..self.c_in {
                            let w = self.support_w_vec(cout, u, cin);
                            for i in 0..3 {
                                for j in 0..3 {
                                    a[(i, j)] += f[cin][i] * w[j];
                                }
                            }
                        }
                    }
                    a_mats[m * self.n_supports + u] = a;
                }
                let mut a0 = Mat3::zeros();
                for cin in 0..self.c_in {
                    let w = self.center_w_vec(cout, cin);
                    for i in 0..3 {
                        for j in 0..3 {
                            a0[(i, j)] += f[cin][i] * w[j];
                        }
                    }
                }
                a0_mats[m] = a0;
            }

            for n in 0..n_points {
                let nbrs = &rf.neighbors[n];
                let udirs = &rf.unit_dirs[n];
                let mut best_val = f64::NEG_INFINITY;
                let mut best_q = 0usize;
                let mut best_m: Vec<u32> = vec![u32::MAX; self.n_supports];
                let mut cur_m: Vec<u32> = vec![u32::MAX; self.n_supports];
                for q in 0..n_q {
                    let r = &rots[q];
                    let mut total = 0.0;
                    for u in 0..self.n_supports {
                        cur_m[u] = u32::MAX;
                        if !live[u] {
                            continue;
                        }
                        let bqu = &b[q][u];
                        let mut best_s = f64::NEG_INFINITY;
                        for (mi, &m) in nbrs.iter().enumerate() {
                            let d = &udirs[mi];
                            if d.norm_squared() < 0.25 {
                                // zero unit dir marks a degenerate neighbor
                                continue;
                            }
                            let a = &a_mats[m * self.n_supports + u];
                            let mut fr = 0.0;
                            for i in 0..3 {
                                for j in 0..3 {
                                    fr += r[(i, j)] * a[(i, j)];
                                }
                            }
                            let s = fr * d.dot(bqu);
                            if s > best_s {
                                best_s = s;
                                cur_m[u] = mi as u32;
                            }
                        }
                        if best_s > f64::NEG_INFINITY {
                            total += best_s;
                        }
                    }
                    if total > best_val {
                        best_val = total;
                        best_q = q;
                        best_m.copy_from_slice(&cur_m);
                    }
                }
                if best_val == f64::NEG_INFINITY {
                    best_val = 0.0;
                }

                let r_act = &rots[best_q];
                let center = if self.center_rotate {
                    let a0 = &a0_mats[n];
                    let mut fr = 0.0;
                    for i in 0..3 {
                        for j in 0..3 {
                            fr += r_act[(i, j)] * a0[(i, j)];
                        }
                    }
                    fr
                } else {
                    (0..self.c_in)
                        .map(|cin| feats.at(n, cin).dot(&self.center_w_vec(cout, cin)))
                        .sum()
                };
                let s = center + best_val;
                let slot = n * self.c_out + cout;
                cache.q_idx[slot] = best_q;
                cache.scalar[slot] = s;
                cache.m_star[slot * self.n_supports..(slot + 1) * self.n_supports]
                    .copy_from_slice(&best_m);
                *out.at_mut(n, cout) = r_act * u0 * s;
            }
        }
        Ok((out, cache))
    }

    /// Backward pass with the discrete argmax choices held fixed
    /// (straight-through over the max). Accumulates parameter gradients and
    /// returns the gradient w.r.t. the input features.
    pub fn backward(
        &mut self,
        feats: &VnFeature,
        rf: &ReceptiveField,
        group: &RotationGroup,
        cache: &GConvCache,
        grad_out: &VnFeature,
    ) -> VnFeature {
        let n_points = feats.points;
        let rots: Vec<Mat3> = group.elements.iter().map(|r| r.as_matrix()).collect();
        let u0 = Vec3::new(LIFT_DIR[0], LIFT_DIR[1], LIFT_DIR[2]);
        let mut grad_in = VnFeature::zeros(n_points, self.c_in);

        for n in 0..n_points {
            for cout in 0..self.c_out {
                let slot = n * self.c_out + cout;
                let r = &rots[cache.q_idx[slot]];
                let gv = grad_out.at(n, cout);
                let gs = gv.dot(&(r * u0));
                if gs == 0.0 {
                    continue;
                }

                // Center term.
                for cin in 0..self.c_in {
                    let w0 = self.center_w_vec(cout, cin);
                    let fv = feats.at(n, cin);
                    let o = (cout * self.c_in + cin) * 3;
                    if self.center_rotate {
                        let gw = r.transpose() * fv * gs;
                        self.center_w.grad[o] += gw.x;
                        self.center_w.grad[o + 1] += gw.y;
                        self.center_w.grad[o + 2] += gw.z;
                        *grad_in.at_mut(n, cin) += r * w0 * gs;
                    } else {
                        self.center_w.grad[o] += gs * fv.x;
                        self.center_w.grad[o + 1] += gs * fv.y;
                        self.center_w.grad[o + 2] += gs * fv.z;
                        *grad_in.at_mut(n, cin) += w0 * gs;
                    }
                }

                // Theta term at the selected (q, m*) slots.
                for u in 0..self.n_supports {
                    let mi = cache.m_star[slot * self.n_supports + u];
                    if mi == u32::MAX {
                        continue;
                    }
                    let mi = mi as usize;
                    let m = rf.neighbors[n][mi];
                    let dhat = &rf.unit_dirs[n][mi];
                    let k = self.support_vec(u);
                    let kn = k.norm();
                    let khat = k / kn;
                    let rk = r * khat;
                    let cos = dhat.dot(&rk);

                    let mut fr = 0.0;
                    for cin in 0..self.c_in {
                        let w = self.support_w_vec(cout, u, cin);
                        let fv = feats.at(m, cin);
                        fr += fv.dot(&(r * w));
                        // d/dw and d/df of <f, R w> * cos.
                        let go = ((cout * self.n_supports + u) * self.c_in + cin) * 3;
                        let gw = r.transpose() * fv * (gs * cos);
                        self.support_w.grad[go] += gw.x;
                        self.support_w.grad[go + 1] += gw.y;
                        self.support_w.grad[go + 2] += gw.z;
                        *grad_in.at_mut(m, cin) += r * w * (gs * cos);
                    }
                    // d/dk of cos(angle(d, R k)).
                    let dcos = (r.transpose() * dhat - khat * cos) / kn;
                    let gk = dcos * (gs * fr);
                    self.supports.grad[u * 3] += gk.x;
                    self.supports.grad[u * 3 + 1] += gk.y;
                    self.supports.grad[u * 3 + 2] += gk.z;
                }
            }
        }
        grad_in
    }
}

impl Module for ConvKernel {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "supports"), &mut self.supports);
        f(&join(prefix, "center_w"), &mut self.center_w);
        f(&join(prefix, "support_w"), &mut self.support_w);
    }
}

/// Reference evaluation of the Theta term for one point and output
/// channel: max over group rotations of the per-support max-neighbor
/// similarity sum. Returns the value and the activated rotation index.
///
/// This is the plain triple loop; the layer forward must agree with it.
pub fn theta(
    kernel: &ConvKernel,
    cout: usize,
    n: usize,
    feats: &VnFeature,
    rf: &ReceptiveField,
    group: &RotationGroup,
) -> (f64, usize) {
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (q, rot) in group.elements.iter().enumerate() {
        let r = rot.as_matrix();
        let mut total = 0.0;
        for u in 0..kernel.n_supports {
            let k = kernel.support_vec(u);
            if k.norm() < DEGENERATE_SUPPORT {
                continue;
            }
            let k_q = r * k;
            let w_q: Vec<Vec3> = (0..kernel.c_in)
                .map(|cin| r * kernel.support_w_vec(cout, u, cin))
                .collect();
            let mut best_m = f64::NEG_INFINITY;
            for (mi, &m) in rf.neighbors[n].iter().enumerate() {
                let d = &rf.dirs[n][mi];
                if let Ok(s) = sim(feats.point(m), &w_q, d, &k_q) {
                    if s > best_m {
                        best_m = s;
                    }
                }
            }
            if best_m > f64::NEG_INFINITY {
                total += best_m;
            }
        }
        if total > best.0 {
            best = (total, q);
        }
    }
    if best.0 == f64::NEG_INFINITY {
        best.0 = 0.0;
    }
    best
}
