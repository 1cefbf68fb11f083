use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const PSNR_CAP: f64 = 99.0;

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-(i as f64 - c).powi(2) / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - WINDOW, w + 1 - WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * x[y * w + ox + i];
            }
            rows[y * ow + ox] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * rows[(oy + i) * ow + ox];
            }
            out[oy * ow + ox] = acc;
        }
    }
    out
}

/// SSIM of two unit-range images given as `channels` planes of `h x w`.
pub fn ssim_unit(a: &[f64], b: &[f64], channels: usize, h: usize, w: usize) -> Result<f64> {
    if a.len() != b.len() || a.len() != channels * h * w {
        return Err(Error::ShapeMismatch {
            context: "ssim",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    if h < WINDOW || w < WINDOW {
        return Err(Error::InvalidConfig(format!("ssim needs images of at least {WINDOW}x{WINDOW}")));
    }
    let k = gaussian_window();
    let hw = h * w;
    let mut total = 0.0;
    for c in 0..channels {
        let pa = &a[c * hw..(c + 1) * hw];
        let pb = &b[c * hw..(c + 1) * hw];
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(pa, h, w, &k);
        let mu_b = filter_valid(pb, h, w, &k);
        let e_aa = filter_valid(&aa, h, w, &k);
        let e_bb = filter_valid(&bb, h, w, &k);
        let e_ab = filter_valid(&ab, h, w, &k);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / channels as f64)
}

/// SSIM of two `[-1, 1]` images, computed on their unit-range versions.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.ensure_same_shape(b, "ssim")?;
    ssim_unit(&a.to_unit_range().data, &b.to_unit_range().data, a.channels, a.height, a.width)
}

/// PSNR in dB for unit-range data, capped at [`PSNR_CAP`].
pub fn psnr_unit(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch {
            context: "psnr",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    // running mean: a constant error gives back its exact square
    let mut mse = 0.0;
    for (k, (x, y)) in a.iter().zip(b).enumerate() {
        mse += ((x - y).powi(2) - mse) / (k + 1) as f64;
    }
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-20.0 * mse.sqrt().log10()).min(PSNR_CAP))
}

pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.ensure_same_shape(b, "psnr")?;
    psnr_unit(&a.to_unit_range().data, &b.to_unit_range().data)
}
