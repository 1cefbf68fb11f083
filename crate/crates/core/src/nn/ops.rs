//! Parameter-free tensor operations used by the denoiser.

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// Backward of SiLU given the pre-activation `x`.
pub fn silu_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = sigmoid(v);
            d * s * (1.0 + v * (1.0 - s))
        })
        .collect()
}

/// Adds `bias[b, c]` to every pixel of channel `c` in item `b`.
pub fn add_channel_bias(x: &mut [f64], bias: &[f64], n: usize, c: usize, hw: usize) {
    debug_assert_eq!(bias.len(), n * c);
    for (plane, &b) in x.chunks_exact_mut(hw).zip(bias) {
        plane.iter_mut().for_each(|v| *v += b);
    }
    debug_assert_eq!(x.len(), n * c * hw);
}

/// Gradient of [`add_channel_bias`] with respect to the bias.
pub fn channel_bias_backward(dy: &[f64], hw: usize) -> Vec<f64> {
    dy.chunks_exact(hw).map(|p| p.iter().sum()).collect()
}

/// 2x2 average pooling; `h` and `w` must be even.
pub fn avg_pool2(x: &[f64], nc: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; nc * ho * wo];
    for p in 0..nc {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for xx in 0..wo {
                let i = 2 * y * w + 2 * xx;
                dst[y * wo + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(dy: &[f64], nc: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = vec![0.0; nc * h * w];
    for p in 0..nc {
        let src = &dy[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = 0.25 * src[(y / 2) * wo + xx / 2];
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling from `h x w`.
pub fn upsample2(x: &[f64], nc: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; nc * ho * wo];
    for p in 0..nc {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for xx in 0..wo {
                dst[y * wo + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

/// Backward of [`upsample2`]; `h x w` is the pre-upsampling size.
pub fn upsample2_backward(dy: &[f64], nc: usize, h: usize, w: usize) -> Vec<f64> {
    let wo = 2 * w;
    let mut dx = vec![0.0; nc * h * w];
    for p in 0..nc {
        let src = &dy[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let i = 2 * y * wo + 2 * xx;
                dst[y * w + xx] = src[i] + src[i + 1] + src[i + wo] + src[i + wo + 1];
            }
        }
    }
    dx
}
