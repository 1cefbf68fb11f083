//! Binary parameter container.
//!
//! ```text
//! magic[4] | version: u32 | header_len: u64 | header (UTF-8 JSON)
//!          | tensor_count: u64 | tensor*
//! tensor = name_len: u32 | name | ndim: u32 | dim: u64 * ndim | f64 * prod(dim)
//! ```
//!
//! All integers and floats are little-endian. A base checkpoint is a single
//! `GDL1` container; temporal checkpoints append a `TCTL` container.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::denoiser::Denoiser;
use super::model::{ConditionalModel, ModelConfig};
use crate::caption::Vocabulary;
use crate::error::{Error, Result};
use crate::fusion::FusionProjector;
use crate::metadata::{AttributeKind, AttributeRanges, MetadataEncoder};
use crate::nn::{Param, Parameterized};
use crate::rng::seeded;

pub const BASE_MAGIC: [u8; 4] = *b"GDL1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub magic: [u8; 4],
    pub header: String,
    pub tensors: Vec<TensorRecord>,
}

impl Container {
    pub fn from_params(magic: [u8; 4], header: String, model: &dyn Parameterized) -> Self {
        let mut tensors = Vec::new();
        model.visit(&mut |p| {
            tensors.push(TensorRecord {
                name: p.name.clone(),
                shape: p.shape.clone(),
                data: p.value.clone(),
            })
        });
        Container {
            magic,
            header,
            tensors,
        }
    }

    /// Copies tensors into `model` by name; every parameter must be present
    /// with a matching shape.
    pub fn load_into(&self, model: &mut dyn Parameterized) -> Result<()> {
        let by_name: std::collections::HashMap<&str, &TensorRecord> =
            self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut err = None;
        let mut used = 0;
        model.visit_mut(&mut |p: &mut Param| {
            if err.is_some() {
                return;
            }
            match by_name.get(p.name.as_str()) {
                Some(t) if t.shape == p.shape => {
                    p.value.copy_from_slice(&t.data);
                    used += 1;
                }
                Some(t) => {
                    err = Some(Error::ShapeMismatch {
                        context: "checkpoint tensor",
                        left: p.shape.clone(),
                        right: t.shape.clone(),
                    })
                }
                None => err = Some(Error::format("checkpoint", format!("missing tensor {}", p.name))),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if used != self.tensors.len() {
            return Err(Error::format(
                "checkpoint",
                format!("{} tensors present, {used} used", self.tensors.len()),
            ));
        }
        Ok(())
    }
}

pub fn write_container(out: &mut Vec<u8>, c: &Container) {
    out.extend_from_slice(&c.magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(c.header.len() as u64).to_le_bytes());
    out.extend_from_slice(c.header.as_bytes());
    out.extend_from_slice(&(c.tensors.len() as u64).to_le_bytes());
    for t in &c.tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("checkpoint", "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::format("checkpoint", "length overflow"))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::format("checkpoint", "invalid UTF-8"))
    }
}

/// Parses one container starting at `offset`; returns it and the offset just
/// past it.
pub fn read_container(bytes: &[u8], offset: usize) -> Result<(Container, usize)> {
    let mut cur = Cursor { bytes, pos: offset };
    let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let header_len = cur.len()?;
    let header = cur.string(header_len)?;
    let count = cur.len()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = cur.string(name_len)?;
        let ndim = cur.u32()? as usize;
        let shape = (0..ndim).map(|_| cur.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::format("checkpoint", "tensor too large"))?;
        let raw = cur.take(numel.checked_mul(8).ok_or_else(|| Error::format("checkpoint", "tensor too large"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push(TensorRecord { name, shape, data });
    }
    Ok((
        Container {
            magic,
            header,
            tensors,
        },
        cur.pos,
    ))
}

#[derive(Debug, Serialize, Deserialize)]
struct BaseHeader {
    config: ModelConfig,
    attribute_order: Vec<String>,
    ranges: AttributeRanges,
    vocabulary: Vec<String>,
}

impl ConditionalModel {
    fn header(&self) -> Result<String> {
        Ok(serde_json::to_string(&BaseHeader {
            config: self.config,
            attribute_order: AttributeKind::ALL.iter().map(|k| k.name().to_string()).collect(),
            ranges: self.ranges.clone(),
            vocabulary: self.vocab.tokens().to_vec(),
        })?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        write_container(&mut out, &Container::from_params(BASE_MAGIC, self.header()?, self));
        Ok(out)
    }

    /// Parses a base checkpoint; returns the model and the number of bytes
    /// consumed (trailing sections are left to the caller).
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let (container, end) = read_container(bytes, 0)?;
        if container.magic != BASE_MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let header: BaseHeader = serde_json::from_str(&container.header)?;
        let order: Vec<&str> = AttributeKind::ALL.iter().map(|k| k.name()).collect();
        if header.attribute_order != order {
            return Err(Error::format("checkpoint", "unexpected attribute order"));
        }
        let config = header.config;
        // Parameters are overwritten below; the seed only shapes the skeleton.
        let mut rng = seeded(0);
        let encoder = MetadataEncoder::new(config.encoder, &mut rng)?;
        let projector = (config.fusion == crate::fusion::FusionStrategy::ConcatProject)
            .then(|| FusionProjector::new(config.encoder.embed_dim, config.fusion_hidden, &mut rng));
        let n_tokens = header.vocabulary.len();
        let vocab = Vocabulary::from_parts(
            header.vocabulary,
            vec![0.0; n_tokens * config.caption_dim],
            config.caption_dim,
        )?;
        let denoiser = Denoiser::new(config.denoiser(), &mut rng);
        let mut model =
            ConditionalModel::from_parts(config, header.ranges, encoder, projector, vocab, denoiser)?;
        container.load_into(&mut model)?;
        model.check_finite()?;
        Ok((model, end))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?.0)
    }
}
