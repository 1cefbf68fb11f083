//! Procedural "satellite-like" scenes whose appearance is driven by the
//! metadata, plus grid files from which the dataset pipeline recovers that
//! metadata exactly.
//!
//! Scenes are value-noise terrain with a per-class motif. Effects are applied
//! in a fixed order: green gain from season and radiation, global brightness
//! from radiation, water from precipitation, blur from wind, then a blend
//! toward white from cloud cover.

use std::path::Path;

use chrono::{DateTime, Datelike, NaiveDate};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_stubs, GridIndex, ImageStub, WINDOW_HOURS};
use crate::error::{Error, Result};
use crate::image::{write_png, ImageTensor};
use crate::metadata::{AttributeKind, MetadataRecord, NUM_ATTRIBUTES};
use crate::rng::{derive, SeededRng};

/// Water color in unit range.
pub const WATER_RGB: [f64; 3] = [0.1, 0.25, 0.55];
/// Blue excess over the other channels that marks a water pixel.
pub const WATER_MARGIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectGains {
    pub cloud_whiteness: f64,
    pub season_green: f64,
    pub radiation_brightness: f64,
    pub wind_blur: f64,
    pub precip_water: f64,
}

impl Default for EffectGains {
    fn default() -> Self {
        EffectGains {
            cloud_whiteness: 0.8,
            season_green: 0.6,
            radiation_brightness: 0.5,
            wind_blur: 1.5,
            precip_water: 0.5,
        }
    }
}

impl EffectGains {
    pub fn none() -> Self {
        EffectGains {
            cloud_whiteness: 0.0,
            season_green: 0.0,
            radiation_brightness: 0.0,
            wind_blur: 0.0,
            precip_water: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    pub image_size: usize,
    pub classes: Vec<String>,
    pub countries: Vec<String>,
    pub gains: EffectGains,
    pub images_per_location: usize,
    pub year: i32,
    pub cell_deg: f64,
    pub lat0: f64,
    pub lon0: f64,
    /// Upper end of the hourly surface radiation drawn per image.
    pub ssr_hourly_max: f64,
    /// Upper end of the hourly precipitation drawn per image.
    pub tp_max: f64,
    /// Bound on each wind component.
    pub wind_max: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 0,
            image_size: 32,
            classes: ["airport", "farm", "port", "stadium"].map(String::from).to_vec(),
            countries: ["chile", "india", "kenya", "norway", "japan"].map(String::from).to_vec(),
            gains: EffectGains::default(),
            images_per_location: 8,
            year: 2018,
            cell_deg: 0.25,
            lat0: 20.125,
            lon0: 10.125,
            ssr_hourly_max: 800.0,
            tp_max: 2.0,
            wind_max: 8.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let g = &self.gains;
        let gains = [g.cloud_whiteness, g.season_green, g.radiation_brightness, g.wind_blur, g.precip_water];
        if gains.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidConfig("effect gains must be finite and non-negative".into()));
        }
        if self.image_size < 8 || self.classes.is_empty() || self.countries.is_empty() {
            return Err(Error::InvalidConfig("world needs size >= 8 and non-empty class/country lists".into()));
        }
        if self.images_per_location < 2 || self.images_per_location > slots_per_year() {
            return Err(Error::InvalidConfig(format!(
                "images_per_location must be in 2..={}",
                slots_per_year()
            )));
        }
        if !(self.ssr_hourly_max > 0.0 && self.tp_max > 0.0 && self.wind_max > 0.0 && self.cell_deg > 0.0) {
            return Err(Error::InvalidConfig("world ranges must be positive".into()));
        }
        Ok(())
    }

    fn ssr_norm(&self, ssr_sum: f64) -> f64 {
        (ssr_sum / (WINDOW_HOURS as f64 * self.ssr_hourly_max)).clamp(0.0, 1.0)
    }

    fn tp_norm(&self, tp: f64) -> f64 {
        (tp / self.tp_max).clamp(0.0, 1.0)
    }

    fn wind_norm(&self, u: f64, v: f64) -> f64 {
        ((u * u + v * v).sqrt() / (self.wind_max * std::f64::consts::SQRT_2)).clamp(0.0, 1.0)
    }
}

/// Seasonal vegetation factor in `[0, 1]`, peaking in July.
pub fn season(month: f64) -> f64 {
    0.5 + 0.5 * (2.0 * std::f64::consts::PI * (month - 7.0) / 12.0).cos()
}

pub fn luminance(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

/// Classifies a unit-range pixel as water.
pub fn is_water(rgb: [f64; 3]) -> bool {
    rgb[2] - rgb[0].max(rgb[1]) > WATER_MARGIN
}

fn terrain_seed(cfg: &WorldConfig, lat: f64, lon: f64) -> u64 {
    cfg.seed ^ lat.to_bits().rotate_left(17) ^ lon.to_bits().wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn value_noise(rng: &mut SeededRng, size: usize, cells: usize) -> Vec<f64> {
    let n = cells + 1;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let fy = (y as f64 + 0.5) / size as f64 * cells as f64;
        let (y0, ty) = (fy.floor() as usize, smooth(fy.fract()));
        for x in 0..size {
            let fx = (x as f64 + 0.5) / size as f64 * cells as f64;
            let (x0, tx) = (fx.floor() as usize, smooth(fx.fract()));
            let at = |i: usize, j: usize| lattice[i * n + j];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out[y * size + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Terrain height in `[0, 1]` for a location.
fn terrain(cfg: &WorldConfig, lat: f64, lon: f64) -> Vec<f64> {
    let mut rng = derive(terrain_seed(cfg, lat, lon), 1);
    let s = cfg.image_size;
    let coarse = value_noise(&mut rng, s, 4);
    let fine = value_noise(&mut rng, s, 8);
    coarse.iter().zip(&fine).map(|(c, f)| 0.65 * c + 0.35 * f).collect()
}

/// Paints the class motif into planar RGB.
fn paint_motif(rgb: &mut [Vec<f64>; 3], motif: usize, size: usize) {
    let mid = size as f64 / 2.0;
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let gray = |rgb: &mut [Vec<f64>; 3], v: f64| {
                for plane in rgb.iter_mut() {
                    plane[i] = v;
                }
            };
            match motif {
                0 => {
                    if (y as f64 - mid).abs() < 2.0 && x >= size / 8 && x < size - size / 8 {
                        gray(rgb, 0.55);
                    }
                }
                1 => {
                    if ((x / 8) + (y / 8)) % 2 == 0 {
                        rgb[1][i] = (rgb[1][i] + 0.08).min(1.0);
                        rgb[0][i] *= 0.9;
                    }
                }
                2 => {
                    if x >= size * 3 / 4 && (y / 4) % 2 == 0 {
                        gray(rgb, 0.35);
                    }
                }
                _ => {
                    let r = ((x as f64 + 0.5 - mid).powi(2) + (y as f64 + 0.5 - mid).powi(2)).sqrt();
                    if (r - size as f64 / 4.0).abs() < 1.2 {
                        gray(rgb, 0.75);
                    }
                }
            }
        }
    }
}

fn gaussian_blur(plane: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let clampi = |v: isize| v.clamp(0, size as isize - 1) as usize;
    let mut tmp = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            for (k, d) in (-radius..=radius).enumerate() {
                acc += kernel[k] * plane[y * size + clampi(x as isize + d)];
            }
            tmp[y * size + x] = acc / norm;
        }
    }
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            for (k, d) in (-radius..=radius).enumerate() {
                acc += kernel[k] * tmp[clampi(y as isize + d) * size + x];
            }
            out[y * size + x] = acc / norm;
        }
    }
    out
}

/// Renders a scene in `[-1, 1]`. Absent attributes fall back to neutral
/// values (no effect).
pub fn render(record: &MetadataRecord, class: &str, cfg: &WorldConfig) -> ImageTensor {
    let s = cfg.image_size;
    let g = &cfg.gains;
    let get = |k: AttributeKind, default: f64| record.get(k).unwrap_or(default);
    let (lat, lon) = (get(AttributeKind::Latitude, 0.0), get(AttributeKind::Longitude, 0.0));

    let h = terrain(cfg, lat, lon);
    let mut rgb = [
        h.iter().map(|v| 0.42 + 0.2 * v).collect::<Vec<_>>(),
        h.iter().map(|v| 0.38 + 0.22 * v).collect(),
        h.iter().map(|v| 0.25 + 0.1 * v).collect(),
    ];
    if let Some(m) = cfg.classes.iter().position(|c| c == class) {
        paint_motif(&mut rgb, m % 4, s);
    }

    let ssr_n = cfg.ssr_norm(get(AttributeKind::Ssr, 0.0));
    let green = 1.0 + g.season_green * season(get(AttributeKind::Month, 7.0)) * ssr_n;
    rgb[1].iter_mut().for_each(|v| *v *= green);

    let bright = 1.0 + g.radiation_brightness * (ssr_n - 0.5);
    rgb.iter_mut().flatten().for_each(|v| *v *= bright);

    let water_frac = (g.precip_water * cfg.tp_norm(get(AttributeKind::Tp, 0.0))).min(1.0);
    let n_water = (water_frac * (s * s) as f64).round() as usize;
    if n_water > 0 {
        let mut order: Vec<usize> = (0..s * s).collect();
        order.sort_by(|&a, &b| h[a].total_cmp(&h[b]).then(a.cmp(&b)));
        for &i in &order[..n_water] {
            for c in 0..3 {
                rgb[c][i] = WATER_RGB[c];
            }
        }
    }

    let sigma = g.wind_blur * cfg.wind_norm(get(AttributeKind::U10, 0.0), get(AttributeKind::V10, 0.0));
    if sigma > 1e-6 {
        for plane in rgb.iter_mut() {
            *plane = gaussian_blur(plane, s, sigma);
        }
    }

    let w = (g.cloud_whiteness * get(AttributeKind::Tcc, 0.0)).clamp(0.0, 1.0);
    let mut data = Vec::with_capacity(3 * s * s);
    for plane in &rgb {
        data.extend(plane.iter().map(|v| {
            let v = v.clamp(0.0, 1.0);
            let v = if w >= 1.0 { 1.0 } else { (1.0 - w) * v + w };
            2.0 * v - 1.0
        }));
    }
    ImageTensor::new(3, s, s, data).expect("render shape")
}

/// Everything [`make_world`] emits.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub stubs: Vec<ImageStub>,
    pub grid: GridIndex,
    /// Metadata used to render each stub's image, aligned with `stubs`.
    pub records: Vec<MetadataRecord>,
    pub images: Vec<ImageTensor>,
}

fn slots_per_year() -> usize {
    365 * 24 / WINDOW_HOURS
}

fn quantize(v: f64) -> f64 {
    (v * 64.0).round() / 64.0
}

fn epoch_hour(year: i32) -> i64 {
    NaiveDate::from_ymd_opt(year, 1, 1)
        .expect("valid year")
        .and_hms_opt(0, 0, 0)
        .unwrap()
        .and_utc()
        .timestamp()
        / 3600
}

/// Window values whose aggregate reproduces `target` exactly: the target plus
/// alternating jitter that cancels over the window.
fn window_series<R: Rng + ?Sized>(rng: &mut R, target: f64, jitter: f64, sum: bool) -> Vec<f64> {
    let n = WINDOW_HOURS;
    if sum {
        // integer hourly values summing to the integer target
        let base = (target / n as f64).floor();
        let extra = (target - base * n as f64) as usize;
        let mut vals: Vec<f64> = (0..n).map(|i| base + if i < extra { 1.0 } else { 0.0 }).collect();
        for pair in vals.chunks_exact_mut(2) {
            let j = rng.random_range(0.0..=jitter).floor().min(pair[0].min(pair[1]));
            pair[0] += j;
            pair[1] -= j;
        }
        vals
    } else {
        let mut vals = vec![target; n];
        for pair in vals.chunks_exact_mut(2) {
            let j = quantize(rng.random_range(0.0..=jitter));
            pair[0] += j;
            pair[1] -= j;
        }
        vals
    }
}

/// Builds `n_images` scenes at `ceil`-balanced locations, each location holding
/// at least two captures in disjoint five-day windows.
pub fn make_world<R: Rng + ?Sized>(n_images: usize, cfg: &WorldConfig, rng: &mut R) -> Result<World> {
    cfg.validate()?;
    if n_images == 1 {
        return Err(Error::InvalidConfig("a world needs 0 or at least 2 images".into()));
    }
    let n_loc = if n_images == 0 { 0 } else { (n_images / cfg.images_per_location).max(1) };
    let nlat = (n_loc as f64).sqrt().ceil().max(1.0) as usize;
    let nlon = n_loc.div_ceil(nlat).max(1);
    let slots = slots_per_year();
    let year_start = epoch_hour(cfg.year);
    let hour_start = year_start - WINDOW_HOURS as i64;
    let hour_count = WINDOW_HOURS * (slots + 1);
    let mut grid = GridIndex::new(cfg.lat0, cfg.lon0, cfg.cell_deg, cfg.cell_deg, nlat, nlon, hour_start, hour_count)?;
    let len = grid.field_len();
    let mut fields: Vec<Vec<f32>> = AttributeKind::grid_kinds().map(|_| vec![0.0; len]).collect();

    let mut stubs = Vec::with_capacity(n_images);
    let mut records = Vec::with_capacity(n_images);
    let mut images = Vec::with_capacity(n_images);
    for loc in 0..n_loc {
        let count = n_images / n_loc + usize::from(loc < n_images % n_loc);
        let (li, lj) = (loc / nlon, loc % nlon);
        let (lat, lon) = grid.cell_center(li, lj);
        let class = cfg.classes[rng.random_range(0..cfg.classes.len())].clone();
        let country = cfg.countries[rng.random_range(0..cfg.countries.len())].clone();
        let mut chosen: Vec<usize> = (0..slots).collect();
        chosen.shuffle(rng);
        chosen.truncate(count);
        chosen.sort_unstable();
        for (k, &slot) in chosen.iter().enumerate() {
            // capture hour index is the last hour of the slot's window
            let hour_idx = WINDOW_HOURS * (slot + 1) + WINDOW_HOURS - 1;
            let capture_time = (hour_start + hour_idx as i64) * 3600 + rng.random_range(0..3600);
            let when = DateTime::from_timestamp(capture_time, 0).expect("in range");
            let month = when.month() as f64;

            let t2m = quantize(5.0 + 20.0 * season(month) + rng.random_range(-5.0..5.0));
            let targets = [
                (AttributeKind::T2m, t2m),
                (AttributeKind::Tp, quantize(rng.random_range(0.0..cfg.tp_max))),
                (AttributeKind::U10, quantize(rng.random_range(-cfg.wind_max..cfg.wind_max))),
                (AttributeKind::V10, quantize(rng.random_range(-cfg.wind_max..cfg.wind_max))),
                (
                    AttributeKind::Ssr,
                    (rng.random_range(0.0..cfg.ssr_hourly_max) * WINDOW_HOURS as f64).round(),
                ),
                (AttributeKind::Tcc, quantize(rng.random_range(0.0..1.0))),
                (AttributeKind::D2m, quantize(t2m - rng.random_range(0.0..8.0))),
            ];

            let mut record = MetadataRecord::empty();
            record.set(AttributeKind::Longitude, lon);
            record.set(AttributeKind::Latitude, lat);
            record.set(AttributeKind::Year, when.year() as f64);
            record.set(AttributeKind::Month, month);
            record.set(AttributeKind::Day, when.day() as f64);
            record.set(AttributeKind::Gsd, quantize(rng.random_range(0.3..2.0)));
            for (f, (kind, target)) in AttributeKind::grid_kinds().zip(targets) {
                debug_assert_eq!(f, kind);
                record.set(kind, target);
                let series = match kind {
                    AttributeKind::Ssr => window_series(rng, target, 40.0, true),
                    AttributeKind::Tcc => {
                        let mut s = vec![target; WINDOW_HOURS];
                        for v in &mut s[..WINDOW_HOURS - 1] {
                            *v = quantize(rng.random_range(0.0..1.0));
                        }
                        s
                    }
                    _ => window_series(rng, target, 1.0, false),
                };
                let field = &mut fields[kind.index() - (NUM_ATTRIBUTES - 7)];
                for (w, v) in series.into_iter().enumerate() {
                    field[grid.offset(hour_idx + 1 - WINDOW_HOURS + w, li, lj)] = v as f32;
                }
            }

            let id = format!("loc{loc:04}_{k:02}");
            images.push(render(&record, &class, cfg));
            stubs.push(ImageStub {
                id: id.clone(),
                capture_time,
                centroid_lat: lat,
                centroid_lon: lon,
                object_class: class.clone(),
                country: country.clone(),
                gsd: record.get(AttributeKind::Gsd).unwrap(),
                image: format!("images/{id}.png"),
            });
            records.push(record);
        }
    }
    for (kind, values) in AttributeKind::grid_kinds().zip(fields) {
        grid.set_field(kind, values)?;
    }
    Ok(World {
        config: cfg.clone(),
        stubs,
        grid,
        records,
        images,
    })
}

#[derive(Serialize)]
struct TruthLine<'a> {
    id: &'a str,
    class: &'a str,
    record: &'a MetadataRecord,
}

impl World {
    /// Writes `stubs.jsonl`, `grid/`, `images/*.png`, `truth.jsonl` and
    /// `world.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        write_stubs(&dir.join("stubs.jsonl"), &self.stubs)?;
        self.grid.write_dir(&dir.join("grid"))?;
        let mut truth = String::new();
        for ((stub, record), image) in self.stubs.iter().zip(&self.records).zip(&self.images) {
            write_png(&dir.join(&stub.image), image)?;
            truth.push_str(&serde_json::to_string(&TruthLine {
                id: &stub.id,
                class: &stub.object_class,
                record,
            })?);
            truth.push('\n');
        }
        let path = dir.join("truth.jsonl");
        std::fs::write(&path, truth).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("world.json");
        std::fs::write(&path, serde_json::to_string_pretty(&self.config)?).map_err(|e| Error::io(&path, e))
    }
}
