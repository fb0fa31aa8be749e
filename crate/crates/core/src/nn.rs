//! Minimal parameter and MLP plumbing shared by every network in the crate.
//!
//! Layers implement explicit forward/backward pairs; caches hold whatever
//! the backward pass needs. Parameters are flat f64 buffers with a parallel
//! gradient buffer, discovered by name through [`Module::visit_params`].

use rand::Rng;

/// A named trainable tensor: flat value buffer plus accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub dims: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn zeros(dims: &[usize]) -> Self {
        let len = dims.iter().product();
        Param {
            dims: dims.to_vec(),
            value: vec![0.0; len],
            grad: vec![0.0; len],
        }
    }

    pub fn init(dims: &[usize], rng: &mut impl Rng, scale: f64) -> Self {
        let len = dims.iter().product();
        Param {
            dims: dims.to_vec(),
            value: (0..len).map(|_| rng.gen_range(-scale..scale)).collect(),
            grad: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Anything holding named parameters.
pub trait Module {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Fully connected layer, `y = W x + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    pub fn new(n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        let scale = (6.0 / (n_in + n_out) as f64).sqrt();
        Linear {
            w: Param::init(&[n_out, n_in], rng, scale),
            b: Param::zeros(&[n_out]),
            n_in,
            n_out,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_in, "linear layer input width mismatch");
        (0..self.n_out)
            .map(|o| {
                let row = &self.w.value[o * self.n_in..(o + 1) * self.n_in];
                self.b.value[o] + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()
            })
            .collect()
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &[f64], grad_out: &[f64]) -> Vec<f64> {
        let mut grad_in = vec![0.0; self.n_in];
        for o in 0..self.n_out {
            let g = grad_out[o];
            self.b.grad[o] += g;
            for i in 0..self.n_in {
                self.w.grad[o * self.n_in + i] += g * x[i];
                grad_in[i] += g * self.w.value[o * self.n_in + i];
            }
        }
        grad_in
    }
}

impl Module for Linear {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}

pub const LEAKY_SLOPE: f64 = 0.01;

/// MLP with leaky-ReLU hidden activations and a linear output layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Per-layer inputs retained for the backward pass.
pub struct MlpCache {
    activations: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn new(widths: &[usize], rng: &mut impl Rng) -> Self {
        assert!(widths.len() >= 2);
        let layers = widths
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().unwrap().n_out
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, MlpCache) {
        let mut activations = vec![x.to_vec()];
        let last = self.layers.len() - 1;
        let mut cur = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(&cur);
            if i != last {
                for v in &mut y {
                    if *v < 0.0 {
                        *v *= LEAKY_SLOPE;
                    }
                }
            }
            activations.push(y.clone());
            cur = y;
        }
        let out = activations.last().unwrap().clone();
        (out, MlpCache { activations })
    }

    pub fn backward(&mut self, cache: &MlpCache, grad_out: &[f64]) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut grad = grad_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            if i != last {
                // Undo the leaky-ReLU using the stored post-activation sign.
                for (g, v) in grad.iter_mut().zip(&cache.activations[i + 1]) {
                    if *v < 0.0 {
                        *g *= LEAKY_SLOPE;
                    }
                }
            }
            grad = self.layers[i].backward(&cache.activations[i], &grad);
        }
        grad
    }
}

impl Module for Mlp {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_params(&join(prefix, &format!("l{i}")), f);
        }
    }
}
