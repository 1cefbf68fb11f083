//! Metadata attributes, normalization to the timestep scale, sinusoidal
//! projection, and per-attribute embedding MLPs.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, Param, Parameterized};

/// Number of conditioning attributes.
pub const NUM_ATTRIBUTES: usize = 13;

/// Upper end of the normalized scale, shared with the diffusion timestep.
pub const NORMALIZED_MAX: f64 = 1000.0;

/// The conditioning attributes in their fixed slot order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeKind {
    Longitude,
    Latitude,
    Year,
    Month,
    Day,
    Gsd,
    T2m,
    Tp,
    U10,
    V10,
    Ssr,
    Tcc,
    D2m,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    None,
    Avg5d,
    Sum5d,
}

impl AttributeKind {
    pub const ALL: [AttributeKind; NUM_ATTRIBUTES] = [
        AttributeKind::Longitude,
        AttributeKind::Latitude,
        AttributeKind::Year,
        AttributeKind::Month,
        AttributeKind::Day,
        AttributeKind::Gsd,
        AttributeKind::T2m,
        AttributeKind::Tp,
        AttributeKind::U10,
        AttributeKind::V10,
        AttributeKind::Ssr,
        AttributeKind::Tcc,
        AttributeKind::D2m,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            AttributeKind::Longitude => "longitude",
            AttributeKind::Latitude => "latitude",
            AttributeKind::Year => "year",
            AttributeKind::Month => "month",
            AttributeKind::Day => "day",
            AttributeKind::Gsd => "gsd",
            AttributeKind::T2m => "t2m",
            AttributeKind::Tp => "tp",
            AttributeKind::U10 => "u10",
            AttributeKind::V10 => "v10",
            AttributeKind::Ssr => "ssr",
            AttributeKind::Tcc => "tcc",
            AttributeKind::D2m => "d2m",
        }
    }

    /// Reanalysis short name for grid-derived attributes.
    pub fn era5_code(self) -> Option<&'static str> {
        match self {
            AttributeKind::T2m => Some("2t"),
            AttributeKind::Tp => Some("tp"),
            AttributeKind::U10 => Some("10u"),
            AttributeKind::V10 => Some("10v"),
            AttributeKind::Ssr => Some("ssr"),
            AttributeKind::Tcc => Some("tcc"),
            AttributeKind::D2m => Some("2d"),
            _ => None,
        }
    }

    pub fn aggregation(self) -> Aggregation {
        match self {
            AttributeKind::T2m
            | AttributeKind::Tp
            | AttributeKind::U10
            | AttributeKind::V10
            | AttributeKind::D2m => Aggregation::Avg5d,
            AttributeKind::Ssr => Aggregation::Sum5d,
            _ => Aggregation::None,
        }
    }

    pub fn is_grid_derived(self) -> bool {
        self.era5_code().is_some()
    }

    /// Physical range for attributes with natural bounds.
    pub fn physical_range(self) -> Option<(f64, f64)> {
        match self {
            AttributeKind::Longitude => Some((-180.0, 180.0)),
            AttributeKind::Latitude => Some((-90.0, 90.0)),
            AttributeKind::Month => Some((1.0, 12.0)),
            AttributeKind::Tcc => Some((0.0, 1.0)),
            _ => None,
        }
    }

    pub fn grid_kinds() -> impl Iterator<Item = AttributeKind> {
        Self::ALL.into_iter().filter(|k| k.is_grid_derived())
    }
}

impl fmt::Display for AttributeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttributeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttributeKind::ALL
            .into_iter()
            .find(|k| k.name() == s || k.era5_code() == Some(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown attribute '{s}'")))
    }
}

/// Normalization reference range for one attribute.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub kind: AttributeKind,
    pub min: f64,
    pub max: f64,
}

impl AttributeSpec {
    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn aggregation(&self) -> Aggregation {
        self.kind.aggregation()
    }

    pub fn is_degenerate(&self) -> bool {
        self.min == self.max
    }
}

/// Maps a raw value onto `[0, 1000]`. Returns the normalized value and
/// whether the input had to be clamped into `[min, max]`.
pub fn normalize(value: f64, spec: &AttributeSpec) -> (f64, bool) {
    if spec.is_degenerate() {
        return (NORMALIZED_MAX / 2.0, value != spec.min);
    }
    let clamped = value.clamp(spec.min, spec.max);
    let k = NORMALIZED_MAX * (clamped - spec.min) / (spec.max - spec.min);
    (k, clamped != value)
}

/// Inverse of [`normalize`] for in-range values.
pub fn denormalize(k: f64, spec: &AttributeSpec) -> f64 {
    spec.min + (spec.max - spec.min) * k / NORMALIZED_MAX
}

/// Normalization ranges for all attributes, in slot order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeRanges {
    specs: Vec<AttributeSpec>,
}

impl AttributeRanges {
    pub fn new(specs: Vec<AttributeSpec>) -> Result<Self> {
        if specs.len() != NUM_ATTRIBUTES {
            return Err(Error::DimensionMismatch {
                context: "attribute ranges",
                expected: NUM_ATTRIBUTES,
                actual: specs.len(),
            });
        }
        for (spec, kind) in specs.iter().zip(AttributeKind::ALL) {
            if spec.kind != kind {
                return Err(Error::InvalidConfig(format!(
                    "attribute range order: expected {kind}, found {}",
                    spec.kind
                )));
            }
            if !(spec.min <= spec.max) {
                return Err(Error::InvalidConfig(format!(
                    "attribute {kind}: min {} > max {}",
                    spec.min, spec.max
                )));
            }
        }
        Ok(AttributeRanges { specs })
    }

    /// Physical ranges for bounded attributes; data ranges from the given
    /// records for the rest. Attributes with no observations fall back to a
    /// degenerate `[0, 0]` range.
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a MetadataRecord>) -> Self {
        let mut lo = [f64::INFINITY; NUM_ATTRIBUTES];
        let mut hi = [f64::NEG_INFINITY; NUM_ATTRIBUTES];
        for r in records {
            for j in 0..NUM_ATTRIBUTES {
                if r.present[j] {
                    lo[j] = lo[j].min(r.values[j]);
                    hi[j] = hi[j].max(r.values[j]);
                }
            }
        }
        let specs = AttributeKind::ALL
            .into_iter()
            .map(|kind| {
                let j = kind.index();
                let (min, max) = kind.physical_range().unwrap_or(if lo[j] <= hi[j] {
                    (lo[j], hi[j])
                } else {
                    (0.0, 0.0)
                });
                AttributeSpec { kind, min, max }
            })
            .collect();
        AttributeRanges { specs }
    }

    pub fn spec(&self, kind: AttributeKind) -> &AttributeSpec {
        &self.specs[kind.index()]
    }

    pub fn specs(&self) -> &[AttributeSpec] {
        &self.specs
    }

    /// Normalizes every present value of `record`; absent slots are 0.
    pub fn normalize_record(&self, record: &MetadataRecord, counter: &ClampCounter) -> [f64; NUM_ATTRIBUTES] {
        let mut out = [0.0; NUM_ATTRIBUTES];
        for j in 0..NUM_ATTRIBUTES {
            if record.present[j] {
                let (k, clamped) = normalize(record.values[j], &self.specs[j]);
                if clamped {
                    counter.bump();
                }
                out[j] = k;
            }
        }
        out
    }
}

/// Counts values that were clamped during normalization.
#[derive(Debug, Default)]
pub struct ClampCounter(AtomicU64);

impl Clone for ClampCounter {
    fn clone(&self) -> Self {
        ClampCounter(AtomicU64::new(self.get()))
    }
}

impl ClampCounter {
    pub fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

/// Raw attribute values in attribute units, with presence flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataRecord {
    pub values: [f64; NUM_ATTRIBUTES],
    pub present: [bool; NUM_ATTRIBUTES],
}

impl Default for MetadataRecord {
    fn default() -> Self {
        Self::empty()
    }
}

impl MetadataRecord {
    pub fn empty() -> Self {
        MetadataRecord {
            values: [0.0; NUM_ATTRIBUTES],
            present: [false; NUM_ATTRIBUTES],
        }
    }

    pub fn full(values: [f64; NUM_ATTRIBUTES]) -> Self {
        MetadataRecord {
            values,
            present: [true; NUM_ATTRIBUTES],
        }
    }

    pub fn get(&self, kind: AttributeKind) -> Option<f64> {
        let j = kind.index();
        self.present[j].then_some(self.values[j])
    }

    pub fn set(&mut self, kind: AttributeKind, value: f64) {
        self.values[kind.index()] = value;
        self.present[kind.index()] = true;
    }

    pub fn clear(&mut self, kind: AttributeKind) {
        self.values[kind.index()] = 0.0;
        self.present[kind.index()] = false;
    }

    pub fn present_count(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }

    /// Checks the range invariants of present values.
    pub fn validate(&self) -> Result<()> {
        let check = |kind: AttributeKind, lo: f64, hi: f64, hi_inclusive: bool| -> Result<()> {
            if let Some(v) = self.get(kind) {
                let ok = v >= lo && if hi_inclusive { v <= hi } else { v < hi };
                if !ok {
                    return Err(Error::InvalidConfig(format!("{kind} = {v} out of range")));
                }
            }
            Ok(())
        };
        for (j, v) in self.values.iter().enumerate() {
            if self.present[j] && !v.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "{} is not finite",
                    AttributeKind::ALL[j]
                )));
            }
        }
        check(AttributeKind::Month, 1.0, 12.0, true)?;
        check(AttributeKind::Day, 1.0, 31.0, true)?;
        check(AttributeKind::Tcc, 0.0, 1.0, true)?;
        check(AttributeKind::Latitude, -90.0, 90.0, true)?;
        check(AttributeKind::Longitude, -180.0, 180.0, false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinusoidConfig {
    pub dim: usize,
    pub omega: f64,
}

impl Default for SinusoidConfig {
    fn default() -> Self {
        SinusoidConfig {
            dim: 64,
            omega: 10_000.0,
        }
    }
}

impl SinusoidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || !self.dim.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "sinusoid dim must be even and positive, got {}",
                self.dim
            )));
        }
        if !(self.omega > 1.0) {
            return Err(Error::InvalidConfig(format!(
                "sinusoid omega must exceed 1, got {}",
                self.omega
            )));
        }
        Ok(())
    }

    /// Frequencies `omega^(-2i/d)` for `i = 0..d/2`.
    pub fn frequencies(&self) -> Vec<f64> {
        let d = self.dim as f64;
        (0..self.dim / 2)
            .map(|i| self.omega.powf(-2.0 * i as f64 / d))
            .collect()
    }
}

/// Interleaved sin/cos projection of a scalar on the timestep scale.
pub fn sinusoidal_project(k: f64, cfg: &SinusoidConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.dim);
    project_into(k, &cfg.frequencies(), &mut out);
    out
}

fn project_into(k: f64, freqs: &[f64], out: &mut Vec<f64>) {
    for &f in freqs {
        let (s, c) = (k * f).sin_cos();
        out.push(s);
        out.push(c);
    }
}

/// Projects a batch of scalars into a row-major `n x dim` matrix.
pub fn sinusoidal_project_batch(ks: &[f64], cfg: &SinusoidConfig) -> Vec<f64> {
    let freqs = cfg.frequencies();
    let mut out = Vec::with_capacity(ks.len() * cfg.dim);
    for &k in ks {
        project_into(k, &freqs, &mut out);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub sinusoid: SinusoidConfig,
    pub hidden: usize,
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            sinusoid: SinusoidConfig::default(),
            hidden: 128,
            embed_dim: 128,
        }
    }
}

/// One embedding MLP per attribute plus a dedicated timestep MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct MetadataEncoder {
    pub config: EncoderConfig,
    pub attributes: Vec<Mlp>,
    pub timestep: Mlp,
}

impl MetadataEncoder {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.sinusoid.validate()?;
        let dims = [config.sinusoid.dim, config.hidden, config.embed_dim];
        let attributes = AttributeKind::ALL
            .iter()
            .map(|k| Mlp::new(&format!("attr.{}", k.name()), &dims, Activation::Silu, rng))
            .collect();
        let timestep = Mlp::new("timestep", &dims, Activation::Silu, rng);
        Ok(MetadataEncoder {
            config,
            attributes,
            timestep,
        })
    }

    pub fn from_parts(config: EncoderConfig, attributes: Vec<Mlp>, timestep: Mlp) -> Result<Self> {
        config.sinusoid.validate()?;
        if attributes.len() != NUM_ATTRIBUTES {
            return Err(Error::DimensionMismatch {
                context: "attribute MLPs",
                expected: NUM_ATTRIBUTES,
                actual: attributes.len(),
            });
        }
        for mlp in attributes.iter().chain(std::iter::once(&timestep)) {
            if mlp.in_dim() != config.sinusoid.dim || mlp.out_dim() != config.embed_dim {
                return Err(Error::InvalidConfig(format!(
                    "embedding MLP maps {} -> {}, expected {} -> {}",
                    mlp.in_dim(),
                    mlp.out_dim(),
                    config.sinusoid.dim,
                    config.embed_dim
                )));
            }
        }
        Ok(MetadataEncoder {
            config,
            attributes,
            timestep,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// Embeds an already-normalized value of attribute `j`.
    pub fn embed_attribute(&self, k: f64, j: usize) -> Result<Vec<f64>> {
        let mlp = &self.attributes[j];
        mlp.check_finite()?;
        Ok(mlp.forward(&sinusoidal_project(k, &self.config.sinusoid), 1))
    }

    pub fn embed_timestep(&self, t: usize) -> Result<Vec<f64>> {
        self.timestep.check_finite()?;
        Ok(self
            .timestep
            .forward(&sinusoidal_project(t as f64, &self.config.sinusoid), 1))
    }
}

impl Parameterized for MetadataEncoder {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.attributes.iter().for_each(|m| m.visit(f));
        self.timestep.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.attributes.iter_mut().for_each(|m| m.visit_mut(f));
        self.timestep.visit_mut(f);
    }
}
