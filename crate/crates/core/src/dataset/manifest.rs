use std::collections::BTreeMap;
use std::path::Path;

use serde::de::Error as _;
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::pipeline::ImageStub;
use crate::caption::{parse_caption, Caption};
use crate::diffusion::TrainingExample;
use crate::error::{Error, Result};
use crate::image::{read_png, ImageTensor};
use crate::metadata::{AttributeKind, AttributeRanges, AttributeSpec, MetadataRecord, NUM_ATTRIBUTES};

const FORMAT: &str = "geodiff-manifest";
const VERSION: u32 = 1;

/// One value per attribute, serialized as a name-keyed map in slot order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NamedValues<T>(pub [T; NUM_ATTRIBUTES]);

impl<T: Serialize> Serialize for NamedValues<T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(NUM_ATTRIBUTES))?;
        for (kind, v) in AttributeKind::ALL.iter().zip(&self.0) {
            map.serialize_entry(kind.name(), v)?;
        }
        map.end()
    }
}

impl<'de, T: Deserialize<'de> + Copy + Default> Deserialize<'de> for NamedValues<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = BTreeMap::<String, T>::deserialize(d)?;
        if map.len() != NUM_ATTRIBUTES {
            return Err(D::Error::custom(format!("expected {NUM_ATTRIBUTES} attributes, got {}", map.len())));
        }
        let mut out = [T::default(); NUM_ATTRIBUTES];
        for kind in AttributeKind::ALL {
            out[kind.index()] = *map
                .get(kind.name())
                .ok_or_else(|| D::Error::custom(format!("missing attribute {kind}")))?;
        }
        Ok(NamedValues(out))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Range {
    min: f64,
    max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    ranges: NamedValues<Range>,
}

impl Default for Range {
    fn default() -> Self {
        Range { min: 0.0, max: 0.0 }
    }
}

impl ManifestHeader {
    pub fn new(ranges: AttributeRanges) -> Self {
        let mut r = [Range::default(); NUM_ATTRIBUTES];
        for (slot, spec) in r.iter_mut().zip(ranges.specs()) {
            *slot = Range { min: spec.min, max: spec.max };
        }
        ManifestHeader {
            format: FORMAT.to_string(),
            version: VERSION,
            ranges: NamedValues(r),
        }
    }

    pub fn ranges(&self) -> Result<AttributeRanges> {
        AttributeRanges::new(
            AttributeKind::ALL
                .iter()
                .zip(&self.ranges.0)
                .map(|(&kind, r)| AttributeSpec { kind, min: r.min, max: r.max })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RecordLine {
    id: String,
    image: String,
    caption: String,
    class: String,
    country: String,
    meta: NamedValues<f64>,
    present: NamedValues<bool>,
}

/// One image with its caption and metadata. Absent values are stored as 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    pub image: String,
    pub caption: String,
    pub class: String,
    pub country: String,
    pub record: MetadataRecord,
}

impl ManifestRecord {
    pub fn new(stub: &ImageStub, caption: String, record: MetadataRecord) -> Self {
        ManifestRecord {
            id: stub.id.clone(),
            image: stub.image.clone(),
            caption,
            class: stub.object_class.clone(),
            country: stub.country.clone(),
            record,
        }
    }

    fn to_line(&self) -> RecordLine {
        let mut meta = self.record.values;
        for j in 0..NUM_ATTRIBUTES {
            if !self.record.present[j] {
                meta[j] = 0.0;
            }
        }
        RecordLine {
            id: self.id.clone(),
            image: self.image.clone(),
            caption: self.caption.clone(),
            class: self.class.clone(),
            country: self.country.clone(),
            meta: NamedValues(meta),
            present: NamedValues(self.record.present),
        }
    }

    fn from_line(line: RecordLine) -> Self {
        ManifestRecord {
            id: line.id,
            image: line.image,
            caption: line.caption,
            class: line.class,
            country: line.country,
            record: MetadataRecord {
                values: line.meta.0,
                present: line.present.0,
            },
        }
    }

    /// The caption clauses actually present in the rendered text.
    pub fn caption_clauses(&self) -> Result<Caption> {
        parse_caption(&self.caption)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: ManifestHeader,
}

impl DatasetManifest {
    pub fn new(header: ManifestHeader, records: Vec<ManifestRecord>) -> Self {
        DatasetManifest { header, records }
    }

    pub fn ranges(&self) -> Result<AttributeRanges> {
        self.header.ranges()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&HeaderLine { header: self.header.clone() })?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(&r.to_line())?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let first = lines.next().ok_or_else(|| Error::format("manifest", "missing header line"))?;
        let header = serde_json::from_str::<HeaderLine>(first)?.header;
        if header.format != FORMAT || header.version != VERSION {
            return Err(Error::format(
                "manifest",
                format!("unsupported format {} v{}", header.format, header.version),
            ));
        }
        header.ranges()?;
        let records = lines
            .map(|l| Ok(ManifestRecord::from_line(serde_json::from_str(l)?)))
            .collect::<Result<_>>()?;
        Ok(DatasetManifest { header, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }
}

/// Loads every image (paths relative to `root`), center-cropped to `crop`,
/// paired with its metadata and caption clauses.
pub fn load_training_examples(manifest: &DatasetManifest, root: &Path, crop: usize) -> Result<Vec<TrainingExample>> {
    manifest
        .records
        .iter()
        .map(|r| {
            let image = read_png(&root.join(&r.image))?;
            let image: ImageTensor = if image.height == crop && image.width == crop {
                image
            } else {
                image.center_crop(crop)?
            };
            r.record.validate()?;
            Ok(TrainingExample {
                image,
                record: r.record.clone(),
                caption: r.caption_clauses()?,
            })
        })
        .collect()
}
