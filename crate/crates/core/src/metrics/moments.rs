use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentOptions {
    /// Side of the block-averaged grid each channel is reduced to.
    pub grid: usize,
    /// Ridge added to both covariances when either is singular; `None`
    /// disables the fallback.
    pub ridge: Option<f64>,
}

impl Default for MomentOptions {
    fn default() -> Self {
        MomentOptions { grid: 4, ridge: Some(1e-6) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentDistance {
    pub value: f64,
    pub ridge_applied: bool,
}

/// Block-averaged unit-range pixels, `channels * grid * grid` values.
pub fn moment_features(image: &ImageTensor, grid: usize) -> Result<Vec<f64>> {
    if grid == 0 || !image.height.is_multiple_of(grid) || !image.width.is_multiple_of(grid) {
        return Err(Error::InvalidConfig(format!(
            "feature grid {grid} does not divide {}x{}",
            image.height, image.width
        )));
    }
    let unit = image.to_unit_range();
    let (bh, bw) = (image.height / grid, image.width / grid);
    let mut out = Vec::with_capacity(image.channels * grid * grid);
    for c in 0..image.channels {
        for gy in 0..grid {
            for gx in 0..grid {
                let mut s = 0.0;
                for y in gy * bh..(gy + 1) * bh {
                    for x in gx * bw..(gx + 1) * bw {
                        s += unit.at(c, y, x);
                    }
                }
                out.push(s / (bh * bw) as f64);
            }
        }
    }
    Ok(out)
}

fn mean_cov(features: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = features.len();
    let d = features[0].len();
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mu = DVector::from_fn(d, |j, _| x.column(j).mean());
    let mut centered = x;
    for j in 0..d {
        let m = mu[j];
        centered.column_mut(j).add_scalar_mut(-m);
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mu, cov)
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(sym(m));
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn is_singular(m: &DMatrix<f64>) -> bool {
    let eig = SymmetricEigen::new(sym(m));
    let max = eig.eigenvalues.max().max(0.0);
    eig.eigenvalues.min() <= 1e-12 * max.max(1e-300)
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn frechet_from_features(a: &[Vec<f64>], b: &[Vec<f64>], ridge: Option<f64>) -> Result<MomentDistance> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidConfig("moment distance needs at least 2 items per set".into()));
    }
    if a[0].len() != b[0].len() {
        return Err(Error::DimensionMismatch {
            context: "moment features",
            expected: a[0].len(),
            actual: b[0].len(),
        });
    }
    let (mu_a, mut sa) = mean_cov(a);
    let (mu_b, mut sb) = mean_cov(b);
    let mut ridge_applied = false;
    if let Some(eps) = ridge {
        if is_singular(&sa) || is_singular(&sb) {
            let d = sa.nrows();
            sa += DMatrix::identity(d, d) * eps;
            sb += DMatrix::identity(d, d) * eps;
            ridge_applied = true;
        }
    }
    let root_a = psd_sqrt(&sa);
    let inner = sym(&(&root_a * &sb * &root_a));
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let value = (&mu_a - &mu_b).norm_squared() + sa.trace() + sb.trace() - 2.0 * cross;
    Ok(MomentDistance { value, ridge_applied })
}

pub fn moment_distance(set_a: &[ImageTensor], set_b: &[ImageTensor], opts: &MomentOptions) -> Result<MomentDistance> {
    let fa = set_a.iter().map(|i| moment_features(i, opts.grid)).collect::<Result<Vec<_>>>()?;
    let fb = set_b.iter().map(|i| moment_features(i, opts.grid)).collect::<Result<Vec<_>>>()?;
    frechet_from_features(&fa, &fb, opts.ridge)
}
