use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use chrono::{DateTime, Datelike};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::grid::GridIndex;
use super::manifest::{DatasetManifest, ManifestHeader, ManifestRecord};
use crate::caption::{render_caption, Caption};
use crate::error::{Error, Result};
use crate::metadata::{Aggregation, AttributeKind, AttributeRanges, MetadataRecord};

/// Hourly samples in one aggregation window.
pub const WINDOW_HOURS: usize = 120;

/// One image before alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageStub {
    pub id: String,
    /// Epoch seconds, UTC.
    pub capture_time: i64,
    pub centroid_lat: f64,
    pub centroid_lon: f64,
    pub object_class: String,
    pub country: String,
    /// Meters per pixel.
    pub gsd: f64,
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum SkipReason {
    BeforeCoverage,
    AfterCoverage,
    IncompleteWindow,
    MissingField(AttributeKind),
    InvalidStub(String),
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SkipReason::BeforeCoverage => f.write_str("capture time before grid coverage"),
            SkipReason::AfterCoverage => f.write_str("capture time after grid coverage"),
            SkipReason::IncompleteWindow => f.write_str("aggregation window starts before grid coverage"),
            SkipReason::MissingField(k) => write!(f, "grid has no field for {k}"),
            SkipReason::InvalidStub(why) => write!(f, "invalid stub: {why}"),
        }
    }
}

/// Records dropped by [`build_manifest`], by stub id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SkipSummary {
    pub skipped: Vec<(String, SkipReason)>,
}

impl SkipSummary {
    pub fn counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (_, reason) in &self.skipped {
            let key = match reason {
                SkipReason::InvalidStub(_) => "invalid stub".to_string(),
                other => other.to_string(),
            };
            *out.entry(key).or_insert(0) += 1;
        }
        out
    }
}

/// Latest grid hour at or before `capture_time` (epoch seconds).
pub fn match_hour(capture_time: i64, grid: &GridIndex) -> std::result::Result<i64, SkipReason> {
    let hour = capture_time.div_euclid(3600);
    if hour < grid.hour_start {
        Err(SkipReason::BeforeCoverage)
    } else if hour >= grid.hour_end() {
        Err(SkipReason::AfterCoverage)
    } else {
        Ok(hour)
    }
}

/// Central angle in radians between two points given in degrees.
pub fn great_circle_angle(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * a.sqrt().min(1.0).asin()
}

/// Cell whose center is closest to `(lat, lon)`; ties go to the smaller
/// latitude index, then the smaller longitude index.
pub fn nearest_cell(lat: f64, lon: f64, grid: &GridIndex) -> (usize, usize) {
    let n = grid.nlon;
    let frac = (lon - grid.lon0) / grid.dlon;
    let mut candidates = Vec::with_capacity(4);
    if grid.wraps_longitude() {
        let lo = frac.floor().rem_euclid(n as f64) as usize % n;
        candidates.push(lo);
        candidates.push((lo + 1) % n);
    } else {
        let clamp = |v: f64| v.clamp(0.0, (n - 1) as f64) as usize;
        candidates.push(clamp(frac.floor()));
        candidates.push(clamp(frac.ceil()));
        // a point outside the span may be closer to either end across the seam
        candidates.push(0);
        candidates.push(n - 1);
    }
    candidates.sort_unstable();
    candidates.dedup();

    let mut best = (f64::INFINITY, 0, 0);
    for i in 0..grid.nlat {
        for &j in &candidates {
            let (clat, clon) = grid.cell_center(i, j);
            let d = great_circle_angle(lat, lon, clat, clon);
            if d < best.0 || (d == best.0 && (i, j) < (best.1, best.2)) {
                best = (d, i, j);
            }
        }
    }
    (best.1, best.2)
}

/// The [`WINDOW_HOURS`] samples of `kind` ending at `hour_idx` inclusive.
pub fn window_values(
    grid: &GridIndex,
    kind: AttributeKind,
    hour_idx: usize,
    cell: (usize, usize),
) -> std::result::Result<Vec<f64>, SkipReason> {
    let field = grid.field(kind).ok_or(SkipReason::MissingField(kind))?;
    if hour_idx + 1 < WINDOW_HOURS {
        return Err(SkipReason::IncompleteWindow);
    }
    Ok((hour_idx + 1 - WINDOW_HOURS..=hour_idx)
        .map(|h| field[grid.offset(h, cell.0, cell.1)] as f64)
        .collect())
}

/// Aggregates a window per its rule; `None` takes the last (matched-hour) sample.
pub fn aggregate_window(values: &[f64], aggregation: Aggregation) -> std::result::Result<f64, SkipReason> {
    let needed = match aggregation {
        Aggregation::None => 1,
        Aggregation::Avg5d | Aggregation::Sum5d => WINDOW_HOURS,
    };
    if values.len() < needed {
        return Err(SkipReason::IncompleteWindow);
    }
    Ok(match aggregation {
        Aggregation::None => values[values.len() - 1],
        Aggregation::Sum5d => values.iter().sum(),
        Aggregation::Avg5d => values.iter().sum::<f64>() / values.len() as f64,
    })
}

/// Full 13-attribute record for one stub.
pub fn align_stub(stub: &ImageStub, grid: &GridIndex) -> std::result::Result<MetadataRecord, SkipReason> {
    let invalid = |why: &str| SkipReason::InvalidStub(why.to_string());
    if !(-90.0..=90.0).contains(&stub.centroid_lat) || !(-180.0..=180.0).contains(&stub.centroid_lon) {
        return Err(invalid("centroid out of range"));
    }
    if !(stub.gsd.is_finite() && stub.gsd > 0.0) {
        return Err(invalid("gsd must be positive"));
    }
    let when = DateTime::from_timestamp(stub.capture_time, 0).ok_or_else(|| invalid("capture time out of range"))?;
    let hour = match_hour(stub.capture_time, grid)?;
    let hour_idx = (hour - grid.hour_start) as usize;
    let cell = nearest_cell(stub.centroid_lat, stub.centroid_lon, grid);

    let mut record = MetadataRecord::empty();
    record.set(AttributeKind::Longitude, stub.centroid_lon);
    record.set(AttributeKind::Latitude, stub.centroid_lat);
    record.set(AttributeKind::Year, when.year() as f64);
    record.set(AttributeKind::Month, when.month() as f64);
    record.set(AttributeKind::Day, when.day() as f64);
    record.set(AttributeKind::Gsd, stub.gsd);
    for kind in AttributeKind::grid_kinds() {
        let window = window_values(grid, kind, hour_idx, cell)?;
        record.set(kind, aggregate_window(&window, kind.aggregation())?);
    }
    Ok(record)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildOptions {
    /// Per-clause caption drop probability at build time.
    pub caption_drop: f64,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions { caption_drop: 0.0 }
    }
}

/// Aligns every stub, in id order, and collects the survivors into a manifest
/// whose header carries the normalization ranges.
pub fn build_manifest<R: Rng + ?Sized>(
    stubs: &[ImageStub],
    grid: &GridIndex,
    rng: &mut R,
    options: &BuildOptions,
) -> (DatasetManifest, SkipSummary) {
    let mut order: Vec<&ImageStub> = stubs.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));

    let mut summary = SkipSummary::default();
    let mut kept = Vec::new();
    for stub in order {
        match align_stub(stub, grid) {
            Ok(record) => {
                let caption = Caption::new(stub.object_class.clone(), stub.country.clone());
                let text = render_caption(&caption, rng, options.caption_drop);
                kept.push(ManifestRecord::new(stub, text, record));
            }
            Err(reason) => summary.skipped.push((stub.id.clone(), reason)),
        }
    }
    let ranges = AttributeRanges::from_records(kept.iter().map(|r| &r.record));
    (DatasetManifest::new(ManifestHeader::new(ranges), kept), summary)
}

pub fn read_stubs(path: &Path) -> Result<Vec<ImageStub>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn write_stubs(path: &Path, stubs: &[ImageStub]) -> Result<()> {
    let mut out = String::new();
    for s in stubs {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn constant_grid(nlat: usize, nlon: usize, hours: usize) -> GridIndex {
        let mut g = GridIndex::new(10.0, 20.0, 0.25, 0.25, nlat, nlon, 400_000, hours).unwrap();
        for (n, kind) in AttributeKind::grid_kinds().enumerate() {
            g.set_field(kind, vec![n as f32 + 0.5; g.field_len()]).unwrap();
        }
        g
    }

    #[test]
    fn hour_matching() {
        let g = constant_grid(1, 1, 10);
        let base = 400_000 * 3600;
        assert_eq!(match_hour(base + 12 * 60 + 34, &g), Ok(400_000));
        assert_eq!(match_hour(base + 3 * 3600, &g), Ok(400_003));
        assert_eq!(match_hour(base - 1, &g), Err(SkipReason::BeforeCoverage));
        assert_eq!(match_hour(base + 10 * 3600, &g), Err(SkipReason::AfterCoverage));
    }

    #[test]
    fn cell_center_maps_to_itself() {
        let g = constant_grid(5, 7, 1);
        for i in 0..5 {
            for j in 0..7 {
                let (lat, lon) = g.cell_center(i, j);
                assert_eq!(nearest_cell(lat, lon, &g), (i, j));
            }
        }
    }

    #[test]
    fn wraparound_is_honored() {
        let g = GridIndex::new(-1.0, 0.0, 1.0, 1.0, 3, 360, 0, 1).unwrap();
        assert_eq!(nearest_cell(0.0, 179.9, &g), (1, 180));
        assert_eq!(nearest_cell(0.0, -0.4, &g), (1, 0));
        assert_eq!(nearest_cell(0.0, -0.6, &g), (1, 359));
    }

    #[test]
    fn aggregation_rules() {
        let c = vec![2.5; WINDOW_HOURS];
        assert_eq!(aggregate_window(&c, Aggregation::Avg5d), Ok(2.5));
        assert_eq!(aggregate_window(&vec![1.0; WINDOW_HOURS], Aggregation::Sum5d), Ok(120.0));
        assert_eq!(aggregate_window(&[1.0, 2.0], Aggregation::None), Ok(2.0));
        assert_eq!(aggregate_window(&c[..119], Aggregation::Avg5d), Err(SkipReason::IncompleteWindow));
    }

    #[test]
    fn single_stub_on_constant_grid() {
        let g = constant_grid(3, 3, 200);
        let (lat, lon) = g.cell_center(1, 2);
        let stub = ImageStub {
            id: "a".into(),
            capture_time: (400_000 + 150) * 3600 + 10,
            centroid_lat: lat,
            centroid_lon: lon,
            object_class: "port".into(),
            country: "chile".into(),
            gsd: 0.5,
            image: "a.png".into(),
        };
        let (m, summary) = build_manifest(std::slice::from_ref(&stub), &g, &mut seeded(1), &BuildOptions::default());
        assert!(summary.skipped.is_empty());
        let r = &m.records[0].record;
        for (n, kind) in AttributeKind::grid_kinds().enumerate() {
            let c = n as f64 + 0.5;
            let want = if kind == AttributeKind::Ssr { 120.0 * c } else { c };
            assert_eq!(r.get(kind), Some(want), "{kind}");
        }
        assert_eq!(m.records[0].caption, "a satellite image of a port in chile");

        let early = ImageStub { capture_time: (400_000 + 100) * 3600, ..stub };
        let (m, summary) = build_manifest(&[early], &g, &mut seeded(1), &BuildOptions::default());
        assert!(m.records.is_empty());
        assert_eq!(summary.skipped[0].1, SkipReason::IncompleteWindow);
    }

    #[test]
    fn table_two_structure() {
        use Aggregation::*;
        use AttributeKind::*;
        for kind in AttributeKind::ALL {
            let want = match kind {
                T2m | Tp | U10 | V10 | D2m => Some(Avg5d),
                Ssr => Some(Sum5d),
                Tcc => Some(None),
                _ => Option::None,
            };
            let got = kind.is_grid_derived().then(|| kind.aggregation());
            assert_eq!(got, want, "{kind}");
        }
    }

    #[test]
    fn empty_stub_list() {
        let g = constant_grid(1, 1, 1);
        let (m, s) = build_manifest(&[], &g, &mut seeded(0), &BuildOptions::default());
        assert!(m.records.is_empty() && s.skipped.is_empty());
        let text = m.to_jsonl().unwrap();
        assert_eq!(DatasetManifest::from_jsonl(&text).unwrap(), m);
    }
}
