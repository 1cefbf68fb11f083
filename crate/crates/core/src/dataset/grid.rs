use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metadata::AttributeKind;

/// Regular latitude/longitude grid of hourly fields.
///
/// `lat0`/`lon0` are the centers of cell `(0, 0)`; field arrays are
/// `[hour][lat][lon]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GridIndex {
    pub lat0: f64,
    pub lon0: f64,
    pub dlat: f64,
    pub dlon: f64,
    pub nlat: usize,
    pub nlon: usize,
    pub hour_start: i64,
    pub hour_count: usize,
    fields: BTreeMap<AttributeKind, Vec<f32>>,
}

impl GridIndex {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        lat0: f64,
        lon0: f64,
        dlat: f64,
        dlon: f64,
        nlat: usize,
        nlon: usize,
        hour_start: i64,
        hour_count: usize,
    ) -> Result<Self> {
        if !(dlat > 0.0 && dlon > 0.0) || nlat == 0 || nlon == 0 {
            return Err(Error::InvalidConfig("grid needs positive spacing and size".into()));
        }
        Ok(GridIndex {
            lat0,
            lon0,
            dlat,
            dlon,
            nlat,
            nlon,
            hour_start,
            hour_count,
            fields: BTreeMap::new(),
        })
    }

    pub fn cells(&self) -> usize {
        self.nlat * self.nlon
    }

    pub fn field_len(&self) -> usize {
        self.hour_count * self.cells()
    }

    pub fn set_field(&mut self, kind: AttributeKind, values: Vec<f32>) -> Result<()> {
        if !kind.is_grid_derived() {
            return Err(Error::InvalidConfig(format!("{kind} is not a grid field")));
        }
        if values.len() != self.field_len() {
            return Err(Error::DimensionMismatch {
                context: "grid field",
                expected: self.field_len(),
                actual: values.len(),
            });
        }
        self.fields.insert(kind, values);
        Ok(())
    }

    pub fn field(&self, kind: AttributeKind) -> Option<&[f32]> {
        self.fields.get(&kind).map(Vec::as_slice)
    }

    pub fn field_mut(&mut self, kind: AttributeKind) -> Option<&mut [f32]> {
        self.fields.get_mut(&kind).map(Vec::as_mut_slice)
    }

    pub fn offset(&self, hour_idx: usize, lat_idx: usize, lon_idx: usize) -> usize {
        (hour_idx * self.nlat + lat_idx) * self.nlon + lon_idx
    }

    pub fn cell_center(&self, lat_idx: usize, lon_idx: usize) -> (f64, f64) {
        (
            self.lat0 + lat_idx as f64 * self.dlat,
            self.lon0 + lon_idx as f64 * self.dlon,
        )
    }

    /// True when the longitude axis covers the full circle.
    pub fn wraps_longitude(&self) -> bool {
        (self.nlon as f64 * self.dlon - 360.0).abs() < 1e-9
    }

    pub fn hour_end(&self) -> i64 {
        self.hour_start + self.hour_count as i64
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut meta = String::new();
        let _ = writeln!(meta, "lat0={}", self.lat0);
        let _ = writeln!(meta, "lon0={}", self.lon0);
        let _ = writeln!(meta, "dlat={}", self.dlat);
        let _ = writeln!(meta, "dlon={}", self.dlon);
        let _ = writeln!(meta, "nlat={}", self.nlat);
        let _ = writeln!(meta, "nlon={}", self.nlon);
        let _ = writeln!(meta, "hour_start={}", self.hour_start);
        let _ = writeln!(meta, "hour_count={}", self.hour_count);
        let path = dir.join("grid.meta");
        std::fs::write(&path, meta).map_err(|e| Error::io(&path, e))?;
        for (kind, values) in &self.fields {
            let path = dir.join(format!("{}.f32", kind.era5_code().expect("grid field")));
            let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Reads `grid.meta` and every `<code>.f32` file present.
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let path = dir.join("grid.meta");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut kv = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("grid.meta", format!("bad line '{line}'")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        fn get<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
            kv.get(key)
                .ok_or_else(|| Error::format("grid.meta", format!("missing key {key}")))?
                .parse()
                .map_err(|_| Error::format("grid.meta", format!("bad value for {key}")))
        }
        let mut grid = GridIndex::new(
            get(&kv, "lat0")?,
            get(&kv, "lon0")?,
            get(&kv, "dlat")?,
            get(&kv, "dlon")?,
            get(&kv, "nlat")?,
            get(&kv, "nlon")?,
            get(&kv, "hour_start")?,
            get(&kv, "hour_count")?,
        )?;
        for kind in AttributeKind::grid_kinds() {
            let path = dir.join(format!("{}.f32", kind.era5_code().unwrap()));
            if !path.exists() {
                continue;
            }
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if bytes.len() % 4 != 0 {
                return Err(Error::format("grid field", format!("{} is not f32-aligned", path.display())));
            }
            let values = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            grid.set_field(kind, values)?;
        }
        Ok(grid)
    }
}
