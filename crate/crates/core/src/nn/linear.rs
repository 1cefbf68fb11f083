use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{gemm, ops, Param, Parameterized};

/// Fully connected layer `y = x W^T + b` over row-major batches.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    /// Uniform init in `+-1/sqrt(in_dim)` for weights and biases.
    pub fn new<R: Rng + ?Sized>(name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let w = draw(in_dim * out_dim);
        let b = draw(out_dim);
        Linear {
            weight: Param::new(format!("{name}.weight"), vec![out_dim, in_dim], w),
            bias: Param::new(format!("{name}.bias"), vec![out_dim], b),
            in_dim,
            out_dim,
        }
    }

    pub fn zeros(name: &str, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: Param::zeros(format!("{name}.weight"), vec![out_dim, in_dim]),
            bias: Param::zeros(format!("{name}.bias"), vec![out_dim]),
            in_dim,
            out_dim,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(&self, x: &[f64], n: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), n * self.in_dim);
        let mut y = Vec::with_capacity(n * self.out_dim);
        for _ in 0..n {
            y.extend_from_slice(&self.bias.value);
        }
        gemm(
            n,
            self.in_dim,
            self.out_dim,
            x,
            false,
            &self.weight.value,
            true,
            &mut y,
            1.0,
        );
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &[f64], dy: &[f64], n: usize) -> Vec<f64> {
        self.accumulate_grads(x, dy, n);
        let mut dx = vec![0.0; n * self.in_dim];
        gemm(
            n,
            self.out_dim,
            self.in_dim,
            dy,
            false,
            &self.weight.value,
            false,
            &mut dx,
            0.0,
        );
        dx
    }

    pub fn accumulate_grads(&mut self, x: &[f64], dy: &[f64], n: usize) {
        gemm(
            self.out_dim,
            n,
            self.in_dim,
            dy,
            true,
            x,
            false,
            &mut self.weight.grad,
            1.0,
        );
        for row in dy.chunks_exact(self.out_dim) {
            for (g, d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
    }
}

impl Parameterized for Linear {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Identity,
}

/// Stack of linear layers with an activation between consecutive layers (none
/// after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

/// Activations retained by [`Mlp::forward_cached`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    n: usize,
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Mlp {
    /// Builds `dims.len() - 1` layers mapping `dims[0] -> ... -> dims[last]`.
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        dims: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&format!("{name}.fc{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers, activation }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(Linear::out_dim).unwrap_or(0)
    }

    pub fn forward(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h, n);
            if i < last {
                h = self.activate(&h);
            }
        }
        h
    }

    pub fn forward_cached(&self, x: &[f64], n: usize) -> (Vec<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let a = layer.forward(&h, n);
            inputs.push(h);
            if i < last {
                h = self.activate(&a);
                pre.push(a);
            } else {
                h = a;
            }
        }
        (h, MlpCache { n, inputs, pre })
    }

    pub fn backward(&mut self, cache: &MlpCache, dy: &[f64]) -> Vec<f64> {
        let mut grad = dy.to_vec();
        for i in (0..self.layers.len()).rev() {
            if i < self.layers.len() - 1 {
                grad = match self.activation {
                    Activation::Silu => ops::silu_backward(&cache.pre[i], &grad),
                    Activation::Identity => grad,
                };
            }
            grad = self.layers[i].backward(&cache.inputs[i], &grad, cache.n);
        }
        grad
    }

    fn activate(&self, a: &[f64]) -> Vec<f64> {
        match self.activation {
            Activation::Silu => ops::silu(a),
            Activation::Identity => a.to_vec(),
        }
    }
}

impl Parameterized for Mlp {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.layers.iter().for_each(|l| l.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
    }
}
