//! Shared fixtures and independent reference implementations for the
//! integration tests.

#![allow(dead_code)]

use geodiff::caption::Caption;
use geodiff::dataset::{GridIndex, ImageStub, SkipReason};
use geodiff::diffusion::{ConditionalModel, ModelConfig, PreparedBatch, TrainConfig, TrainingExample};
use geodiff::fusion::FusionStrategy;
use geodiff::image::ImageTensor;
use geodiff::metadata::{Aggregation, AttributeKind, AttributeRanges, MetadataRecord, NUM_ATTRIBUTES};
use geodiff::nn::Parameterized;
use geodiff::rng::{normal_vec, seeded};
use rand::Rng;

// ---------------------------------------------------------------------------
// gradient harness

pub fn tiny_config(fusion: FusionStrategy) -> ModelConfig {
    let mut c = ModelConfig { fusion, ..Default::default() };
    c.image_size = 8;
    c.base_channels = 4;
    c.mid_channels = 6;
    c.encoder.sinusoid.dim = 8;
    c.encoder.hidden = 10;
    c.encoder.embed_dim = 6;
    c.fusion_hidden = 12;
    c.caption_dim = 5;
    c
}

pub fn tiny_setup(fusion: FusionStrategy) -> (ConditionalModel, PreparedBatch) {
    let mut rng = seeded(21);
    let records: Vec<MetadataRecord> = (0..4)
        .map(|_| MetadataRecord::full(std::array::from_fn(|_| rng.random_range(1.0..12.0))))
        .collect();
    let ranges = AttributeRanges::from_records(&records);
    let model = ConditionalModel::new(
        tiny_config(fusion),
        ranges,
        ["a satellite image of a farm in chile", "a satellite image of a port"],
        &mut rng,
    )
    .unwrap();
    let examples: Vec<TrainingExample> = records
        .iter()
        .enumerate()
        .map(|(i, r)| TrainingExample {
            image: ImageTensor::new(3, 8, 8, normal_vec(&mut rng, 192).iter().map(|v| v.tanh()).collect()).unwrap(),
            record: r.clone(),
            caption: if i % 2 == 0 { Caption::new("farm", "chile") } else { Caption::new("port", "peru") },
        })
        .collect();
    let refs: Vec<&TrainingExample> = examples.iter().collect();
    let cfg = TrainConfig { p_full_drop: 0.0, p_slot_keep: 0.8, ..Default::default() };
    let batch = model.prepare_batch(&refs, &mut rng, &cfg).unwrap();
    (model, batch)
}

/// Checks `count` random coordinates of parameters whose name starts with
/// `prefix` against a fourth-order central difference; returns the worst
/// relative error.
pub fn gradient_check(model: &ConditionalModel, batch: &PreparedBatch, prefix: &str, count: usize, seed: u64) -> f64 {
    let mut m = model.clone();
    m.zero_grad();
    m.loss_and_grad(batch).unwrap();
    let mut coords = Vec::new();
    m.visit(&mut |p| {
        if p.name.starts_with(prefix) {
            for i in 0..p.len() {
                coords.push((p.name.clone(), i, p.grad[i]));
            }
        }
    });
    assert!(!coords.is_empty(), "no parameters under {prefix}");
    let mut rng = seeded(seed);
    let mut worst: f64 = 0.0;
    let mut taken = 0;
    while taken < count {
        let (name, i, g) = coords[rng.random_range(0..coords.len())].clone();
        let h = 1e-3;
        let eval = |delta: f64| {
            let mut p = model.clone();
            p.visit_mut(&mut |q| {
                if q.name == name {
                    q.value[i] += delta;
                }
            });
            p.loss(batch).unwrap()
        };
        let fd = (8.0 * (eval(h) - eval(-h)) - (eval(2.0 * h) - eval(-2.0 * h))) / (12.0 * h);
        // coordinates with vanishing gradient carry no relative information
        if fd.abs().max(g.abs()) < 1e-9 {
            continue;
        }
        let rel = (fd - g).abs() / fd.abs().max(g.abs());
        if rel > 1e-4 {
            eprintln!("{name}[{i}] analytic {g:e} numeric {fd:e}");
        }
        worst = worst.max(rel);
        taken += 1;
    }
    worst
}

// ---------------------------------------------------------------------------
// scalar oracles

/// Slot `2i` is `sin(k * omega^(-2i/d))`, slot `2i+1` the matching cosine.
pub fn sinusoid_oracle(k: f64, d: usize, omega: f64) -> Vec<f64> {
    (0..d)
        .map(|slot| {
            let i = (slot / 2) as f64;
            let arg = k * omega.powf(-2.0 * i / d as f64);
            if slot % 2 == 0 {
                arg.sin()
            } else {
                arg.cos()
            }
        })
        .collect()
}

/// Proleptic Gregorian (year, month, day) of an epoch second.
pub fn civil_date(t: i64) -> (i64, u32, u32) {
    let z = t.div_euclid(86_400) + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let day = doy - (153 * mp + 2) / 5 + 1;
    let month = if mp < 10 { mp + 3 } else { mp - 9 };
    let year = yoe + era * 400 + i64::from(month <= 2);
    (year, month as u32, day as u32)
}

pub fn haversine(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let r = std::f64::consts::PI / 180.0;
    let h = ((lat2 - lat1) * r / 2.0).sin().powi(2)
        + (lat1 * r).cos() * (lat2 * r).cos() * ((lon2 - lon1) * r / 2.0).sin().powi(2);
    2.0 * h.sqrt().min(1.0).asin()
}

/// Exhaustive nearest cell; ties go to the smaller `(lat, lon)` index pair.
pub fn brute_nearest(grid: &GridIndex, lat: f64, lon: f64) -> (usize, usize) {
    let mut best = (f64::INFINITY, 0, 0);
    for i in 0..grid.nlat {
        for j in 0..grid.nlon {
            let d = haversine(lat, lon, grid.lat0 + i as f64 * grid.dlat, grid.lon0 + j as f64 * grid.dlon);
            if d < best.0 {
                best = (d, i, j);
            }
        }
    }
    (best.1, best.2)
}

/// Running mean and sum, one sample at a time.
#[derive(Default)]
pub struct Streaming {
    pub n: usize,
    pub mean: f64,
    pub sum: f64,
}

impl Streaming {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        self.mean += (x - self.mean) / self.n as f64;
        self.sum += x;
    }
}

/// Alignment of one stub computed from first principles.
pub fn align_oracle(stub: &ImageStub, grid: &GridIndex) -> Result<[f64; NUM_ATTRIBUTES], SkipReason> {
    let hour = stub.capture_time.div_euclid(3600);
    if hour < grid.hour_start {
        return Err(SkipReason::BeforeCoverage);
    }
    if hour >= grid.hour_start + grid.hour_count as i64 {
        return Err(SkipReason::AfterCoverage);
    }
    let idx = (hour - grid.hour_start) as usize;
    if idx < 119 {
        return Err(SkipReason::IncompleteWindow);
    }
    let (ci, cj) = brute_nearest(grid, stub.centroid_lat, stub.centroid_lon);
    let (y, m, d) = civil_date(stub.capture_time);
    let mut out = [0.0; NUM_ATTRIBUTES];
    out[AttributeKind::Longitude.index()] = stub.centroid_lon;
    out[AttributeKind::Latitude.index()] = stub.centroid_lat;
    out[AttributeKind::Year.index()] = y as f64;
    out[AttributeKind::Month.index()] = m as f64;
    out[AttributeKind::Day.index()] = d as f64;
    out[AttributeKind::Gsd.index()] = stub.gsd;
    for kind in AttributeKind::grid_kinds() {
        let field = grid.field(kind).ok_or(SkipReason::MissingField(kind))?;
        let at = |h: usize| field[(h * grid.nlat + ci) * grid.nlon + cj] as f64;
        let mut acc = Streaming::default();
        for h in idx - 119..=idx {
            acc.push(at(h));
        }
        out[kind.index()] = match kind.aggregation() {
            Aggregation::None => at(idx),
            Aggregation::Avg5d => acc.mean,
            Aggregation::Sum5d => acc.sum,
        };
    }
    Ok(out)
}

/// Random grid with every reanalysis field filled.
pub fn random_grid<R: Rng>(
    rng: &mut R,
    (lat0, lon0, dlat, dlon): (f64, f64, f64, f64),
    (nlat, nlon): (usize, usize),
    hour_start: i64,
    hour_count: usize,
) -> GridIndex {
    let mut grid = GridIndex::new(lat0, lon0, dlat, dlon, nlat, nlon, hour_start, hour_count).unwrap();
    for kind in AttributeKind::grid_kinds() {
        let scale = if kind == AttributeKind::Ssr { 1e6 } else { 10.0 };
        let values = (0..grid.field_len()).map(|_| (rng.random::<f64>() * scale) as f32).collect();
        grid.set_field(kind, values).unwrap();
    }
    grid
}

/// Stubs anywhere on the globe with capture times spread before, across and
/// after the grid's coverage.
pub fn random_stubs<R: Rng>(rng: &mut R, n: usize, grid: &GridIndex) -> Vec<ImageStub> {
    let span = grid.hour_count as i64;
    (0..n)
        .map(|i| {
            let hour = grid.hour_start + rng.random_range(-span / 4..span + span / 4);
            ImageStub {
                id: format!("s{i:05}"),
                capture_time: hour * 3600 + rng.random_range(0..3600),
                centroid_lat: rng.random_range(-90.0..=90.0),
                centroid_lon: rng.random_range(-180.0..=180.0),
                object_class: "farm".into(),
                country: "chile".into(),
                gsd: rng.random_range(0.3..30.0),
                image: format!("images/s{i:05}.png"),
            }
        })
        .collect()
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

// ---------------------------------------------------------------------------
// image quality oracles

fn gaussian_2d() -> Vec<f64> {
    let mut w = vec![0.0; 121];
    for y in 0..11 {
        for x in 0..11 {
            let r2 = ((y as f64 - 5.0).powi(2) + (x as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5);
            w[y * 11 + x] = (-r2).exp();
        }
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// SSIM by direct 2-D convolution with centered local moments.
pub fn ssim_oracle(a: &[f64], b: &[f64], channels: usize, h: usize, w: usize) -> f64 {
    let k = gaussian_2d();
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    for c in 0..channels {
        let pa = &a[c * h * w..(c + 1) * h * w];
        let pb = &b[c * h * w..(c + 1) * h * w];
        let mut sum = 0.0;
        let mut count = 0;
        for oy in 0..=h - 11 {
            for ox in 0..=w - 11 {
                let px = |p: &[f64], y: usize, x: usize| p[(oy + y) * w + ox + x];
                let (mut ma, mut mb) = (0.0, 0.0);
                for y in 0..11 {
                    for x in 0..11 {
                        ma += k[y * 11 + x] * px(pa, y, x);
                        mb += k[y * 11 + x] * px(pb, y, x);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for y in 0..11 {
                    for x in 0..11 {
                        let (da, db) = (px(pa, y, x) - ma, px(pb, y, x) - mb);
                        va += k[y * 11 + x] * da * da;
                        vb += k[y * 11 + x] * db * db;
                        cov += k[y * 11 + x] * da * db;
                    }
                }
                sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total += sum / count as f64;
    }
    total / channels as f64
}

pub fn psnr_oracle(a: &[f64], b: &[f64]) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    10.0 * (1.0 / mse).log10()
}

// ---------------------------------------------------------------------------
// Fréchet reference on plain matrices

type Mat = Vec<Vec<f64>>;

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = a.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i][k];
            for j in 0..n {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

/// Gauss-Jordan inverse with partial pivoting.
fn inverse(m: &Mat) -> Mat {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| f64::from(u8::from(i == j))));
            r
        })
        .collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
        a.swap(col, piv);
        let p = a[col][col];
        a[col].iter_mut().for_each(|v| *v /= p);
        for r in 0..n {
            if r != col {
                let f = a[r][col];
                if f != 0.0 {
                    for c in 0..2 * n {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
    }
    a.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// Trace of the principal square root of `m` by Denman-Beavers iteration.
fn sqrt_trace(m: &Mat) -> f64 {
    let n = m.len();
    let mut y = m.clone();
    let mut z: Mat = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for _ in 0..100 {
        let (yi, zi) = (inverse(&y), inverse(&z));
        let ny: Mat = (0..n).map(|i| (0..n).map(|j| 0.5 * (y[i][j] + zi[i][j])).collect()).collect();
        let nz: Mat = (0..n).map(|i| (0..n).map(|j| 0.5 * (z[i][j] + yi[i][j])).collect()).collect();
        let delta: f64 = ny.iter().flatten().zip(y.iter().flatten()).map(|(a, b)| (a - b).abs()).sum();
        y = ny;
        z = nz;
        if delta < 1e-15 {
            break;
        }
    }
    (0..n).map(|i| y[i][i]).sum()
}

fn moments(x: &[Vec<f64>]) -> (Vec<f64>, Mat) {
    let (n, d) = (x.len(), x[0].len());
    let mut mu = vec![0.0; d];
    for row in x {
        for j in 0..d {
            mu[j] += row[j] / n as f64;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for row in x {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (row[i] - mu[i]) * (row[j] - mu[j]) / (n as f64 - 1.0);
            }
        }
    }
    (mu, cov)
}

/// `|mu_a - mu_b|^2 + tr(Sa) + tr(Sb) - 2 tr((Sa Sb)^(1/2))`.
pub fn frechet_oracle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (ma, sa) = moments(a);
    let (mb, sb) = moments(b);
    let d = ma.len();
    let mean: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
    let tr = |s: &Mat| (0..d).map(|i| s[i][i]).sum::<f64>();
    mean + tr(&sa) + tr(&sb) - 2.0 * sqrt_trace(&matmul(&sa, &sb))
}
