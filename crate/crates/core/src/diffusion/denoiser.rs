//! Two-resolution convolutional noise predictor.
//!
//! Layout (C1 = `base`, C2 = `mid` channels):
//!
//! ```text
//! x -> conv_in -> conv1 (h1, skip) -> pool -> conv2 -> conv3 (h3)
//!   -> 1x1 up-projection -> upsample -> + h1 -> conv4 -> conv_out
//! ```
//!
//! Every 3x3 block adds a per-channel bias produced by a linear map of the
//! conditioning input `u = [c, caption_embedding]` before its SiLU. The
//! temporal control branch may add feature maps right after `h1` and `h3`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{
    add_channel_bias, avg_pool2, avg_pool2_backward, channel_bias_backward, silu, silu_backward,
    upsample2, upsample2_backward, Conv2d, Linear, Param, Parameterized,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub size: usize,
    pub base: usize,
    pub mid: usize,
    pub cond_dim: usize,
}

impl DenoiserConfig {
    pub fn level1_len(&self) -> usize {
        self.base * self.size * self.size
    }

    pub fn level2_len(&self) -> usize {
        self.mid * self.size * self.size / 4
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.size * self.size
    }
}

/// Additive feature maps injected after the skip block (`level1`) and the
/// low-resolution block (`level2`), batched like the activations.
#[derive(Debug, Clone, Default)]
pub struct Injection {
    pub level1: Option<Vec<f64>>,
    pub level2: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    conv_in: Conv2d,
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    conv_up: Conv2d,
    conv4: Conv2d,
    conv_out: Conv2d,
    cond: Vec<Linear>,
}

/// Activations kept for the backward pass.
#[derive(Debug)]
pub struct DenoiserCache {
    n: usize,
    x: Vec<f64>,
    u: Vec<f64>,
    a0: Vec<f64>,
    h0: Vec<f64>,
    a1: Vec<f64>,
    p: Vec<f64>,
    a2: Vec<f64>,
    h2: Vec<f64>,
    a3: Vec<f64>,
    h3: Vec<f64>,
    s: Vec<f64>,
    a4: Vec<f64>,
    h4: Vec<f64>,
}

#[derive(Debug)]
pub struct DenoiserGrads {
    /// Gradient with respect to the conditioning input, `n x cond_dim`.
    pub du: Vec<f64>,
    pub d_level1: Vec<f64>,
    pub d_level2: Vec<f64>,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Self {
        let (c, c1, c2) = (config.channels, config.base, config.mid);
        let cond = [c1, c1, c2, c2, c1]
            .iter()
            .enumerate()
            .map(|(i, &ch)| Linear::new(&format!("denoiser.cond{i}"), config.cond_dim, ch, rng))
            .collect();
        Denoiser {
            config,
            conv_in: Conv2d::new("denoiser.conv_in", c, c1, 3, rng),
            conv1: Conv2d::new("denoiser.conv1", c1, c1, 3, rng),
            conv2: Conv2d::new("denoiser.conv2", c1, c2, 3, rng),
            conv3: Conv2d::new("denoiser.conv3", c2, c2, 3, rng),
            conv_up: Conv2d::new("denoiser.conv_up", c2, c1, 1, rng),
            conv4: Conv2d::new("denoiser.conv4", c1, c1, 3, rng),
            conv_out: Conv2d::new("denoiser.conv_out", c1, c, 3, rng),
            cond,
        }
    }

    pub fn forward(&self, x: &[f64], u: &[f64], n: usize, inj: Option<&Injection>) -> Vec<f64> {
        self.forward_cached(x, u, n, inj).0
    }

    pub fn forward_cached(
        &self,
        x: &[f64],
        u: &[f64],
        n: usize,
        inj: Option<&Injection>,
    ) -> (Vec<f64>, DenoiserCache) {
        let cfg = &self.config;
        let (s1, s2) = (cfg.size, cfg.size / 2);
        let (hw1, hw2) = (s1 * s1, s2 * s2);
        let (c1, c2) = (cfg.base, cfg.mid);
        debug_assert_eq!(x.len(), n * cfg.image_len());
        debug_assert_eq!(u.len(), n * cfg.cond_dim);
        let biases: Vec<Vec<f64>> = self.cond.iter().map(|l| l.forward(u, n)).collect();

        let mut a0 = self.conv_in.forward(x, n, s1, s1);
        add_channel_bias(&mut a0, &biases[0], n, c1, hw1);
        let h0 = silu(&a0);

        let mut a1 = self.conv1.forward(&h0, n, s1, s1);
        add_channel_bias(&mut a1, &biases[1], n, c1, hw1);
        let mut h1 = silu(&a1);
        if let Some(extra) = inj.and_then(|i| i.level1.as_ref()) {
            h1.iter_mut().zip(extra).for_each(|(h, e)| *h += e);
        }
        let p = avg_pool2(&h1, n * c1, s1, s1);

        let mut a2 = self.conv2.forward(&p, n, s2, s2);
        add_channel_bias(&mut a2, &biases[2], n, c2, hw2);
        let h2 = silu(&a2);

        let mut a3 = self.conv3.forward(&h2, n, s2, s2);
        add_channel_bias(&mut a3, &biases[3], n, c2, hw2);
        let mut h3 = silu(&a3);
        if let Some(extra) = inj.and_then(|i| i.level2.as_ref()) {
            h3.iter_mut().zip(extra).for_each(|(h, e)| *h += e);
        }

        let q = self.conv_up.forward(&h3, n, s2, s2);
        let mut s = upsample2(&q, n * c1, s2, s2);
        s.iter_mut().zip(&h1).for_each(|(a, b)| *a += b);

        let mut a4 = self.conv4.forward(&s, n, s1, s1);
        add_channel_bias(&mut a4, &biases[4], n, c1, hw1);
        let h4 = silu(&a4);
        let out = self.conv_out.forward(&h4, n, s1, s1);
        let cache = DenoiserCache {
            n,
            x: x.to_vec(),
            u: u.to_vec(),
            a0,
            h0,
            a1,
            p,
            a2,
            h2,
            a3,
            h3,
            s,
            a4,
            h4,
        };
        (out, cache)
    }

    /// Accumulates parameter gradients given `dL/d(out)`.
    pub fn backward(&mut self, cache: &DenoiserCache, dout: &[f64]) -> DenoiserGrads {
        let cfg = self.config;
        let n = cache.n;
        let (s1, s2) = (cfg.size, cfg.size / 2);
        let (hw1, hw2) = (s1 * s1, s2 * s2);
        let c1 = cfg.base;

        let dh4 = self.conv_out.backward(&cache.h4, dout, n, s1, s1, true).unwrap();
        let da4 = silu_backward(&cache.a4, &dh4);
        let db4 = channel_bias_backward(&da4, hw1);
        let ds = self.conv4.backward(&cache.s, &da4, n, s1, s1, true).unwrap();

        let dq = upsample2_backward(&ds, n * c1, s2, s2);
        let dh3 = self.conv_up.backward(&cache.h3, &dq, n, s2, s2, true).unwrap();
        let da3 = silu_backward(&cache.a3, &dh3);
        let db3 = channel_bias_backward(&da3, hw2);
        let dh2 = self.conv3.backward(&cache.h2, &da3, n, s2, s2, true).unwrap();
        let da2 = silu_backward(&cache.a2, &dh2);
        let db2 = channel_bias_backward(&da2, hw2);
        let dp = self.conv2.backward(&cache.p, &da2, n, s2, s2, true).unwrap();

        let mut dh1 = avg_pool2_backward(&dp, n * c1, s1, s1);
        dh1.iter_mut().zip(&ds).for_each(|(a, b)| *a += b);
        let da1 = silu_backward(&cache.a1, &dh1);
        let db1 = channel_bias_backward(&da1, hw1);
        let dh0 = self.conv1.backward(&cache.h0, &da1, n, s1, s1, true).unwrap();
        let da0 = silu_backward(&cache.a0, &dh0);
        let db0 = channel_bias_backward(&da0, hw1);
        self.conv_in.backward(&cache.x, &da0, n, s1, s1, false);

        let mut du = vec![0.0; n * cfg.cond_dim];
        for (layer, db) in self.cond.iter_mut().zip([db0, db1, db2, db3, db4]) {
            let d = layer.backward(&cache.u, &db, n);
            du.iter_mut().zip(d).for_each(|(a, b)| *a += b);
        }
        DenoiserGrads {
            du,
            d_level1: dh1,
            d_level2: dh3,
        }
    }
}

impl Parameterized for Denoiser {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        for conv in [
            &self.conv_in,
            &self.conv1,
            &self.conv2,
            &self.conv3,
            &self.conv_up,
            &self.conv4,
            &self.conv_out,
        ] {
            conv.visit(f);
        }
        self.cond.iter().for_each(|l| l.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for conv in [
            &mut self.conv_in,
            &mut self.conv1,
            &mut self.conv2,
            &mut self.conv3,
            &mut self.conv_up,
            &mut self.conv4,
            &mut self.conv_out,
        ] {
            conv.visit_mut(f);
        }
        self.cond.iter_mut().for_each(|l| l.visit_mut(f));
    }
}
