use rand::Rng;

use super::{gemm, Param, Parameterized};

/// Square-kernel convolution with stride 1 and "same" zero padding, over
/// NCHW batches. Implemented as im2col followed by a matrix product.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    cin: usize,
    cout: usize,
    kernel: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let fan_in = cin * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..cout * fan_in)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let b = (0..cout).map(|_| rng.random_range(-bound..bound)).collect();
        Conv2d {
            weight: Param::new(format!("{name}.weight"), vec![cout, cin, kernel, kernel], w),
            bias: Param::new(format!("{name}.bias"), vec![cout], b),
            cin,
            cout,
            kernel,
        }
    }

    pub fn cin(&self) -> usize {
        self.cin
    }

    pub fn cout(&self) -> usize {
        self.cout
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    fn patch(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    fn im2col(&self, x: &[f64], h: usize, w: usize, cols: &mut [f64]) {
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let hw = h * w;
        for ci in 0..self.cin {
            let plane = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * hw;
                    let dst = &mut cols[row..row + hw];
                    let oy = ky as isize - pad;
                    let ox = kx as isize - pad;
                    for y in 0..h {
                        let sy = y as isize + oy;
                        let out = &mut dst[y * w..(y + 1) * w];
                        if sy < 0 || sy >= h as isize {
                            out.fill(0.0);
                            continue;
                        }
                        let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                        for (xx, o) in out.iter_mut().enumerate() {
                            let sx = xx as isize + ox;
                            *o = if sx < 0 || sx >= w as isize {
                                0.0
                            } else {
                                src[sx as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize, dx: &mut [f64]) {
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let hw = h * w;
        for ci in 0..self.cin {
            let plane = &mut dx[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * hw;
                    let src = &cols[row..row + hw];
                    let oy = ky as isize - pad;
                    let ox = kx as isize - pad;
                    for y in 0..h {
                        let sy = y as isize + oy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                        for xx in 0..w {
                            let sx = xx as isize + ox;
                            if sx >= 0 && sx < w as isize {
                                dst[sx as usize] += src[y * w + xx];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[f64], n: usize, h: usize, w: usize) -> Vec<f64> {
        let hw = h * w;
        debug_assert_eq!(x.len(), n * self.cin * hw);
        let mut out = vec![0.0; n * self.cout * hw];
        let mut cols = if self.kernel == 1 {
            Vec::new()
        } else {
            vec![0.0; self.patch() * hw]
        };
        for b in 0..n {
            let xi = &x[b * self.cin * hw..(b + 1) * self.cin * hw];
            let yo = &mut out[b * self.cout * hw..(b + 1) * self.cout * hw];
            for (c, plane) in yo.chunks_exact_mut(hw).enumerate() {
                plane.fill(self.bias.value[c]);
            }
            let src: &[f64] = if self.kernel == 1 {
                xi
            } else {
                self.im2col(xi, h, w, &mut cols);
                &cols
            };
            gemm(self.cout, self.patch(), hw, &self.weight.value, false, src, false, yo, 1.0);
        }
        out
    }

    /// Accumulates parameter gradients; returns `dL/dx` when `want_dx`.
    pub fn backward(
        &mut self,
        x: &[f64],
        dy: &[f64],
        n: usize,
        h: usize,
        w: usize,
        want_dx: bool,
    ) -> Option<Vec<f64>> {
        let hw = h * w;
        let patch = self.patch();
        let mut dx = want_dx.then(|| vec![0.0; n * self.cin * hw]);
        let mut cols = if self.kernel == 1 {
            Vec::new()
        } else {
            vec![0.0; patch * hw]
        };
        let mut dcols = vec![0.0; patch * hw];
        for b in 0..n {
            let xi = &x[b * self.cin * hw..(b + 1) * self.cin * hw];
            let dyi = &dy[b * self.cout * hw..(b + 1) * self.cout * hw];
            for (c, plane) in dyi.chunks_exact(hw).enumerate() {
                self.bias.grad[c] += plane.iter().sum::<f64>();
            }
            let src: &[f64] = if self.kernel == 1 {
                xi
            } else {
                self.im2col(xi, h, w, &mut cols);
                &cols
            };
            gemm(self.cout, hw, patch, dyi, false, src, true, &mut self.weight.grad, 1.0);
            if let Some(dx) = dx.as_mut() {
                let dxi = &mut dx[b * self.cin * hw..(b + 1) * self.cin * hw];
                if self.kernel == 1 {
                    gemm(patch, self.cout, hw, &self.weight.value, true, dyi, false, dxi, 0.0);
                } else {
                    gemm(patch, self.cout, hw, &self.weight.value, true, dyi, false, &mut dcols, 0.0);
                    self.col2im(&dcols, h, w, dxi);
                }
            }
        }
        dx
    }
}

impl Parameterized for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
