use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{ConditionalModel, DdimConfig, SampleCondition};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::metadata::{AttributeKind, NORMALIZED_MAX, NUM_ATTRIBUTES};
use crate::nn::gemm;
use crate::world::{is_water, luminance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeFusion {
    /// Sum of kept slot embeddings.
    Additive,
    /// Slot embeddings laid end to end, masked slots as zero blocks.
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoverabilityConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// Attributes masked in every drawn record.
    pub missing: usize,
    pub ridge: f64,
}

impl Default for RecoverabilityConfig {
    fn default() -> Self {
        RecoverabilityConfig { n_train: 1200, n_test: 200, missing: 0, ridge: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoverabilityResult {
    pub fusion: ProbeFusion,
    pub missing: usize,
    /// Held-out MAE on normalized values, over test rows where the attribute
    /// is present; NaN when there are none.
    pub mae: [f64; NUM_ATTRIBUTES],
    pub evaluated: [usize; NUM_ATTRIBUTES],
}

/// Fits per-attribute ridge regressions from the fused representation back
/// to the normalized values and reports held-out MAE.
///
/// `embed(k, j)` is the embedding of normalized value `k` in slot `j`. The
/// records and masks drawn from `rng` do not depend on `fusion`, so two calls
/// with equally seeded generators form a paired trial.
pub fn recoverability_probe<R, E>(
    embed: E,
    fusion: ProbeFusion,
    cfg: &RecoverabilityConfig,
    rng: &mut R,
) -> Result<RecoverabilityResult>
where
    R: Rng + ?Sized,
    E: Fn(f64, usize) -> Result<Vec<f64>>,
{
    if cfg.missing > NUM_ATTRIBUTES || cfg.n_train < 2 || cfg.n_test == 0 {
        return Err(Error::InvalidConfig("recoverability probe needs missing <= 13 and non-trivial splits".into()));
    }
    let n = cfg.n_train + cfg.n_test;
    let mut values = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for _ in 0..n {
        let v: [f64; NUM_ATTRIBUTES] = std::array::from_fn(|_| rng.random_range(0.0..=NORMALIZED_MAX));
        let mut order: Vec<usize> = (0..NUM_ATTRIBUTES).collect();
        order.shuffle(rng);
        let mut mask = [true; NUM_ATTRIBUTES];
        for &j in &order[..cfg.missing] {
            mask[j] = false;
        }
        values.push(v);
        masks.push(mask);
    }

    let mut features: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (v, mask) in values.iter().zip(&masks) {
        let slots = (0..NUM_ATTRIBUTES)
            .map(|j| embed(v[j], j))
            .collect::<Result<Vec<_>>>()?;
        let dim = slots[0].len();
        features.push(match fusion {
            ProbeFusion::Concat => slots
                .iter()
                .zip(mask)
                .flat_map(|(s, &keep)| s.iter().map(move |x| if keep { *x } else { 0.0 }))
                .collect(),
            ProbeFusion::Additive => {
                let mut m = vec![0.0; dim];
                for (s, &keep) in slots.iter().zip(mask) {
                    if keep {
                        m.iter_mut().zip(s).for_each(|(a, b)| *a += b);
                    }
                }
                m
            }
        });
    }
    let d = features[0].len();

    let mut mae = [f64::NAN; NUM_ATTRIBUTES];
    let mut evaluated = [0; NUM_ATTRIBUTES];
    for j in 0..NUM_ATTRIBUTES {
        let train: Vec<usize> = (0..cfg.n_train).filter(|&i| masks[i][j]).collect();
        let test: Vec<usize> = (cfg.n_train..n).filter(|&i| masks[i][j]).collect();
        if train.len() < 2 || test.is_empty() {
            continue;
        }
        let w = ridge_fit(&features, &values, j, &train, d, cfg.ridge)?;
        let err: f64 = test
            .iter()
            .map(|&i| {
                let pred = w.bias + features[i].iter().zip(&w.coef).map(|(x, c)| x * c).sum::<f64>();
                (pred - values[i][j]).abs()
            })
            .sum();
        mae[j] = err / test.len() as f64;
        evaluated[j] = test.len();
    }
    Ok(RecoverabilityResult { fusion, missing: cfg.missing, mae, evaluated })
}

struct LinearFit {
    coef: Vec<f64>,
    bias: f64,
}

/// Centered ridge regression; the intercept is not penalized.
fn ridge_fit(
    features: &[Vec<f64>],
    values: &[[f64; NUM_ATTRIBUTES]],
    j: usize,
    rows: &[usize],
    d: usize,
    ridge: f64,
) -> Result<LinearFit> {
    let m = rows.len();
    let mut x_mean = vec![0.0; d];
    let mut y_mean = 0.0;
    for &i in rows {
        x_mean.iter_mut().zip(&features[i]).for_each(|(a, b)| *a += b);
        y_mean += values[i][j];
    }
    x_mean.iter_mut().for_each(|v| *v /= m as f64);
    y_mean /= m as f64;

    let mut xc = Vec::with_capacity(m * d);
    let mut yc = Vec::with_capacity(m);
    for &i in rows {
        xc.extend(features[i].iter().zip(&x_mean).map(|(a, b)| a - b));
        yc.push(values[i][j] - y_mean);
    }
    // Wide designs solve the m x m dual system; both forms give the same
    // coefficients.
    let coef = if d > m {
        let mut kernel = vec![0.0; m * m];
        gemm(m, d, m, &xc, false, &xc, true, &mut kernel, 0.0);
        let alpha = solve_ridge(m, kernel, yc, ridge)?;
        let mut coef = vec![0.0; d];
        gemm(d, m, 1, &xc, true, &alpha, false, &mut coef, 0.0);
        coef
    } else {
        let mut gram = vec![0.0; d * d];
        gemm(d, m, d, &xc, true, &xc, false, &mut gram, 0.0);
        let mut rhs = vec![0.0; d];
        gemm(d, m, 1, &xc, true, &yc, false, &mut rhs, 0.0);
        solve_ridge(d, gram, rhs, ridge)?
    };
    let bias = y_mean - coef.iter().zip(&x_mean).map(|(c, x)| c * x).sum::<f64>();
    Ok(LinearFit { coef, bias })
}

fn solve_ridge(n: usize, gram: Vec<f64>, rhs: Vec<f64>, ridge: f64) -> Result<Vec<f64>> {
    let mut a = DMatrix::from_row_slice(n, n, &gram);
    for k in 0..n {
        a[(k, k)] += ridge;
    }
    let b = DVector::from_vec(rhs);
    let x = match a.clone().cholesky() {
        Some(ch) => ch.solve(&b),
        None => a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::InvalidConfig("probe regression is singular".into()))?,
    };
    Ok(x.iter().copied().collect())
}

/// Spearman rank correlation with average ranks for ties; 0 when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut k = i;
            while k + 1 < idx.len() && v[idx[k + 1]] == v[idx[i]] {
                k += 1;
            }
            let avg = (i + k) as f64 / 2.0 + 1.0;
            for &p in &idx[i..=k] {
                r[p] = avg;
            }
            i = k + 1;
        }
        r
    }
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FidelityStatistic {
    Luminance,
    GreenMean,
    WaterPixels,
}

impl FidelityStatistic {
    pub fn for_attribute(kind: AttributeKind) -> Result<Self> {
        match kind {
            AttributeKind::Tcc => Ok(FidelityStatistic::Luminance),
            AttributeKind::Ssr => Ok(FidelityStatistic::GreenMean),
            AttributeKind::Tp => Ok(FidelityStatistic::WaterPixels),
            other => Err(Error::InvalidConfig(format!("no fidelity statistic for {other}"))),
        }
    }
}

pub fn image_statistic(stat: FidelityStatistic, image: &ImageTensor) -> f64 {
    let u = image.to_unit_range();
    let hw = u.height * u.width;
    let px = |i: usize| [u.data[i], u.data[hw + i], u.data[2 * hw + i]];
    match stat {
        FidelityStatistic::Luminance => (0..hw).map(|i| luminance(px(i))).sum::<f64>() / hw as f64,
        FidelityStatistic::GreenMean => u.plane(1).iter().sum::<f64>() / hw as f64,
        FidelityStatistic::WaterPixels => (0..hw).filter(|&i| is_water(px(i))).count() as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityResult {
    pub attribute: AttributeKind,
    pub statistic: FidelityStatistic,
    pub sweep: Vec<f64>,
    /// Statistic per sweep value, averaged over seeds.
    pub mean_statistic: Vec<f64>,
    /// Spearman correlation of the sweep against the statistic, one per seed.
    pub per_seed: Vec<f64>,
    /// Mean of `per_seed`.
    pub spearman: f64,
    /// Correlation over all (value, seed) samples pooled.
    pub pooled: f64,
}

/// Sweeps one attribute of `base` (raw units), samples each setting with every
/// seed, and correlates the matching image statistic with the sweep.
pub fn fidelity_probe(
    model: &ConditionalModel,
    attribute: AttributeKind,
    sweep: &[f64],
    base: &SampleCondition,
    seeds: &[u64],
    ddim: &DdimConfig,
) -> Result<FidelityResult> {
    let stat = FidelityStatistic::for_attribute(attribute)?;
    if sweep.len() < 2 || seeds.is_empty() {
        return Err(Error::InvalidConfig("fidelity probe needs >= 2 sweep values and a seed".into()));
    }
    let mut conditions = Vec::with_capacity(sweep.len() * seeds.len());
    let mut all_seeds = Vec::with_capacity(conditions.capacity());
    for &v in sweep {
        for &s in seeds {
            let mut c = base.clone();
            c.record.set(attribute, v);
            conditions.push(c);
            all_seeds.push(s);
        }
    }
    let images = model.sample(&conditions, &all_seeds, ddim)?;
    let values: Vec<f64> = images.iter().map(|im| image_statistic(stat, im)).collect();
    let ns = seeds.len();
    let mean_statistic = (0..sweep.len())
        .map(|i| values[i * ns..(i + 1) * ns].iter().sum::<f64>() / ns as f64)
        .collect();
    let per_seed: Vec<f64> = (0..ns)
        .map(|s| {
            let ys: Vec<f64> = (0..sweep.len()).map(|i| values[i * ns + s]).collect();
            spearman(sweep, &ys)
        })
        .collect();
    let xs: Vec<f64> = sweep.iter().flat_map(|&v| std::iter::repeat_n(v, ns)).collect();
    Ok(FidelityResult {
        attribute,
        statistic: stat,
        sweep: sweep.to_vec(),
        mean_statistic,
        spearman: per_seed.iter().sum::<f64>() / ns as f64,
        per_seed,
        pooled: spearman(&xs, &values),
    })
}
