//! Frame-wise temporal control.
//!
//! Up to three conditioning frames, each tagged with its own metadata, are
//! encoded independently by a small convolutional branch, pooled with an
//! order-invariant mean, and added to the base denoiser's activations through
//! 1x1 convolutions scaled by per-level gates. Gates start at exactly zero, so
//! a fresh branch leaves the base model's output bit-identical.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{
    read_container, write_container, CondInput, ConditionalModel, Container, DdimConfig, Injection,
    PreparedBatch, SampleCondition, TrainConfig, TrainingExample,
};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::metadata::{AttributeKind, MetadataRecord};
use crate::nn::{avg_pool2, avg_pool2_backward, silu, silu_backward, AdamW, Conv2d, Linear, Param, Parameterized};

pub const MAX_FRAMES: usize = 3;
pub const TEMPORAL_MAGIC: [u8; 4] = *b"TCTL";

/// Conditioning frames with their metadata, padded to [`MAX_FRAMES`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningSequence {
    pub frames: Vec<ImageTensor>,
    pub records: Vec<MetadataRecord>,
    /// True for entries that are copies added by padding.
    pub padding: Vec<bool>,
}

impl ConditioningSequence {
    /// An unpadded sequence of 1 to 3 real frames.
    pub fn new(frames: Vec<ImageTensor>, records: Vec<MetadataRecord>) -> Result<Self> {
        if frames.is_empty() || frames.len() > MAX_FRAMES || frames.len() != records.len() {
            return Err(Error::InvalidConfig(format!(
                "a sequence needs 1..={MAX_FRAMES} frames with one record each"
            )));
        }
        for f in &frames[1..] {
            f.ensure_same_shape(&frames[0], "sequence frame")?;
        }
        let padding = vec![false; frames.len()];
        Ok(ConditioningSequence { frames, records, padding })
    }

    /// Pads to [`MAX_FRAMES`] with copies of randomly chosen real entries.
    pub fn padded<R: Rng + ?Sized>(mut self, rng: &mut R) -> Self {
        let real = self.real_count();
        while self.frames.len() < MAX_FRAMES {
            let k = rng.random_range(0..real);
            self.frames.push(self.frames[k].clone());
            self.records.push(self.records[k].clone());
            self.padding.push(true);
        }
        self
    }

    pub fn real_count(&self) -> usize {
        self.padding.iter().filter(|p| !**p).count()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// The same entries reordered; `order` must be a permutation.
    pub fn permuted(&self, order: &[usize]) -> Self {
        ConditioningSequence {
            frames: order.iter().map(|&i| self.frames[i].clone()).collect(),
            records: order.iter().map(|&i| self.records[i].clone()).collect(),
            padding: order.iter().map(|&i| self.padding[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalConfig {
    /// Channels the frame metadata is projected to before broadcasting.
    pub meta_channels: usize,
    /// Feature width at full resolution.
    pub width1: usize,
    /// Feature width at half resolution.
    pub width2: usize,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        TemporalConfig { meta_channels: 8, width1: 8, width2: 16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalTrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for TemporalTrainConfig {
    fn default() -> Self {
        TemporalTrainConfig { batch_size: 16, iterations: 4000, learning_rate: 4e-4, weight_decay: 0.01 }
    }
}

/// One gate per injection point.
#[derive(Debug, Clone, PartialEq)]
pub struct MixGate {
    pub alpha: Param,
}

impl MixGate {
    pub fn new(blocks: usize) -> Self {
        MixGate { alpha: Param::zeros("control.gates", vec![blocks]) }
    }

    pub fn is_closed(&self) -> bool {
        self.alpha.value.iter().all(|&a| a == 0.0)
    }
}

/// Features of frames at both resolutions, batched `[n, c, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    pub n: usize,
    pub level1: Vec<f64>,
    pub level2: Vec<f64>,
}

pub struct FrameCache {
    n: usize,
    m: Vec<f64>,
    x: Vec<f64>,
    a1: Vec<f64>,
    h1: Vec<f64>,
    a2: Vec<f64>,
    f1: Vec<f64>,
    p: Vec<f64>,
    a3: Vec<f64>,
}

/// The trainable control branch.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlBranch {
    pub config: TemporalConfig,
    channels: usize,
    size: usize,
    base: usize,
    mid: usize,
    meta_proj: Linear,
    enc1: Conv2d,
    enc2: Conv2d,
    enc3: Conv2d,
    inj1: Conv2d,
    inj2: Conv2d,
    pub gates: MixGate,
}

impl ControlBranch {
    pub fn new<R: Rng + ?Sized>(config: TemporalConfig, base: &ConditionalModel, rng: &mut R) -> Self {
        let mc = base.config;
        let (w1, w2) = (config.width1, config.width2);
        ControlBranch {
            config,
            channels: mc.channels,
            size: mc.image_size,
            base: mc.base_channels,
            mid: mc.mid_channels,
            meta_proj: Linear::new("control.meta_proj", base.embed_dim(), config.meta_channels, rng),
            enc1: Conv2d::new("control.enc1", mc.channels + config.meta_channels, w1, 3, rng),
            enc2: Conv2d::new("control.enc2", w1, w1, 3, rng),
            enc3: Conv2d::new("control.enc3", w1, w2, 3, rng),
            inj1: Conv2d::new("control.inj1", w1, mc.base_channels, 1, rng),
            inj2: Conv2d::new("control.inj2", w2, mc.mid_channels, 1, rng),
            gates: MixGate::new(2),
        }
    }

    fn hw(&self) -> (usize, usize) {
        (self.size * self.size, (self.size / 2) * (self.size / 2))
    }

    /// Encodes `n` frames (`frames` is `[n, channels, size, size]`) with their
    /// fused metadata vectors `m` (`[n, embed_dim]`).
    pub fn encode_frames(&self, frames: &[f64], m: &[f64], n: usize) -> Result<(FrameFeatures, FrameCache)> {
        let (hw, _) = self.hw();
        let (c, cm, s) = (self.channels, self.config.meta_channels, self.size);
        if frames.len() != n * c * hw || m.len() != n * self.meta_proj.in_dim() {
            return Err(Error::ShapeMismatch {
                context: "control frames",
                left: vec![frames.len(), m.len()],
                right: vec![n * c * hw, n * self.meta_proj.in_dim()],
            });
        }
        let meta = self.meta_proj.forward(m, n);
        let mut x = Vec::with_capacity(n * (c + cm) * hw);
        for i in 0..n {
            x.extend_from_slice(&frames[i * c * hw..(i + 1) * c * hw]);
            for k in 0..cm {
                x.extend(std::iter::repeat_n(meta[i * cm + k], hw));
            }
        }
        let a1 = self.enc1.forward(&x, n, s, s);
        let h1 = silu(&a1);
        let a2 = self.enc2.forward(&h1, n, s, s);
        let f1 = silu(&a2);
        let p = avg_pool2(&f1, n * self.config.width1, s, s);
        let a3 = self.enc3.forward(&p, n, s / 2, s / 2);
        let f2 = silu(&a3);
        let feats = FrameFeatures { n, level1: f1.clone(), level2: f2 };
        let cache = FrameCache { n, m: m.to_vec(), x, a1, h1, a2, f1, p, a3 };
        Ok((feats, cache))
    }

    /// Accumulates parameter gradients from feature gradients.
    pub fn backward_frames(&mut self, cache: &FrameCache, d1: &[f64], d2: &[f64]) {
        let (hw, _) = self.hw();
        let (n, s, c, cm) = (cache.n, self.size, self.channels, self.config.meta_channels);
        let da3 = silu_backward(&cache.a3, d2);
        let dp = self.enc3.backward(&cache.p, &da3, n, s / 2, s / 2, true).unwrap();
        let mut df1 = avg_pool2_backward(&dp, n * self.config.width1, s, s);
        df1.iter_mut().zip(d1).for_each(|(a, b)| *a += b);
        let da2 = silu_backward(&cache.a2, &df1);
        let dh1 = self.enc2.backward(&cache.h1, &da2, n, s, s, true).unwrap();
        let da1 = silu_backward(&cache.a1, &dh1);
        let dx = self.enc1.backward(&cache.x, &da1, n, s, s, true).unwrap();
        let mut dmeta = vec![0.0; n * cm];
        for i in 0..n {
            for k in 0..cm {
                let off = (i * (c + cm) + c + k) * hw;
                dmeta[i * cm + k] = dx[off..off + hw].iter().sum();
            }
        }
        self.meta_proj.accumulate_grads(&cache.m, &dmeta, n);
        debug_assert_eq!(cache.f1.len(), n * self.config.width1 * hw);
    }

    /// Gated injection maps for `n` items of pooled features. A closed gate
    /// yields no map at its level.
    pub fn injection(&self, pooled: &FrameFeatures) -> Injection {
        let (a1, a2) = (self.gates.alpha.value[0], self.gates.alpha.value[1]);
        let (p1, p2) = self.project(pooled);
        Injection {
            level1: (a1 != 0.0).then(|| p1.iter().map(|v| a1 * v).collect()),
            level2: (a2 != 0.0).then(|| p2.iter().map(|v| a2 * v).collect()),
        }
    }

    fn project(&self, pooled: &FrameFeatures) -> (Vec<f64>, Vec<f64>) {
        let s = self.size;
        (
            self.inj1.forward(&pooled.level1, pooled.n, s, s),
            self.inj2.forward(&pooled.level2, pooled.n, s / 2, s / 2),
        )
    }
}

impl Parameterized for ControlBranch {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.meta_proj.visit(f);
        for conv in [&self.enc1, &self.enc2, &self.enc3, &self.inj1, &self.inj2] {
            conv.visit(f);
        }
        f(&self.gates.alpha);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.meta_proj.visit_mut(f);
        for conv in [&mut self.enc1, &mut self.enc2, &mut self.enc3, &mut self.inj1, &mut self.inj2] {
            conv.visit_mut(f);
        }
        f(&mut self.gates.alpha);
    }
}

fn maps_equal(a: &FrameFeatures, i: usize, j: usize) -> bool {
    let (l1, l2) = (a.level1.len() / a.n, a.level2.len() / a.n);
    a.level1[i * l1..(i + 1) * l1]
        .iter()
        .zip(&a.level1[j * l1..(j + 1) * l1])
        .chain(a.level2[i * l2..(i + 1) * l2].iter().zip(&a.level2[j * l2..(j + 1) * l2]))
        .all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Indices of the frames that enter the pool: real entries, with
/// bit-identical feature maps counted once.
pub fn pooled_members(features: &FrameFeatures, padding: &[bool]) -> Vec<usize> {
    let mut members: Vec<usize> = Vec::new();
    for i in 0..features.n {
        if padding.get(i).copied().unwrap_or(false) {
            continue;
        }
        if !members.iter().any(|&j| maps_equal(features, i, j)) {
            members.push(i);
        }
    }
    members
}

/// Mean over the distinct real frames of one sequence. Each element is
/// summed in sorted order, so the result does not depend on frame order.
pub fn aggregate_sequence(features: &FrameFeatures, padding: &[bool]) -> FrameFeatures {
    let members = pooled_members(features, padding);
    let pool = |data: &[f64]| -> Vec<f64> {
        let len = data.len() / features.n;
        let k = members.len() as f64;
        (0..len)
            .map(|e| {
                let mut vals: Vec<f64> = members.iter().map(|&i| data[i * len + e]).collect();
                vals.sort_by(f64::total_cmp);
                vals.iter().sum::<f64>() / k
            })
            .collect()
    };
    FrameFeatures { n: 1, level1: pool(&features.level1), level2: pool(&features.level2) }
}

/// Base model plus control branch.
#[derive(Debug, Clone)]
pub struct TemporalModel {
    pub base: ConditionalModel,
    pub branch: ControlBranch,
    base_hash: String,
}

#[derive(Serialize, Deserialize)]
struct TemporalHeader {
    config: TemporalConfig,
    base_sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl TemporalModel {
    pub fn new<R: Rng + ?Sized>(base: ConditionalModel, config: TemporalConfig, rng: &mut R) -> Result<Self> {
        let base_hash = sha256_hex(&base.to_bytes()?);
        let branch = ControlBranch::new(config, &base, rng);
        Ok(TemporalModel { base, branch, base_hash })
    }

    pub fn base_hash(&self) -> &str {
        &self.base_hash
    }

    /// Features of one frame tagged with its metadata.
    pub fn encode_frame(&self, frame: &ImageTensor, record: &MetadataRecord) -> Result<FrameFeatures> {
        let m = self.base.metadata_embedding(record)?;
        Ok(self.branch.encode_frames(&frame.data, &m, 1)?.0)
    }

    fn encode_sequence(&self, seq: &ConditioningSequence) -> Result<FrameFeatures> {
        let mut frames = Vec::new();
        let mut ms = Vec::new();
        for (f, r) in seq.frames.iter().zip(&seq.records) {
            frames.extend_from_slice(&f.data);
            ms.extend(self.base.metadata_embedding(r)?);
        }
        let (feats, _) = self.branch.encode_frames(&frames, &ms, seq.len())?;
        Ok(aggregate_sequence(&feats, &seq.padding))
    }

    /// Pooled features for a batch of sequences, stacked.
    pub fn pooled_batch(&self, sequences: &[ConditioningSequence]) -> Result<FrameFeatures> {
        let mut out = FrameFeatures { n: sequences.len(), level1: Vec::new(), level2: Vec::new() };
        for seq in sequences {
            let p = self.encode_sequence(seq)?;
            out.level1.extend(p.level1);
            out.level2.extend(p.level2);
        }
        Ok(out)
    }

    /// Noise prediction of the base with the control injected.
    pub fn controlled_denoise(
        &self,
        z_t: &[f64],
        inputs: &[CondInput],
        ts: &[usize],
        sequences: &[ConditioningSequence],
    ) -> Result<Vec<f64>> {
        let inj = self.branch.injection(&self.pooled_batch(sequences)?);
        self.base.predict_noise(z_t, inputs, ts, Some(&inj))
    }

    pub fn sample(
        &self,
        conditions: &[SampleCondition],
        sequences: &[ConditioningSequence],
        seeds: &[u64],
        ddim: &DdimConfig,
    ) -> Result<Vec<ImageTensor>> {
        if conditions.len() != sequences.len() {
            return Err(Error::DimensionMismatch {
                context: "temporal sample sequences",
                expected: conditions.len(),
                actual: sequences.len(),
            });
        }
        let inputs: Vec<CondInput> = conditions
            .iter()
            .map(|c| self.base.cond_input(&c.record, &c.caption))
            .collect();
        let inj = self.branch.injection(&self.pooled_batch(sequences)?);
        self.base.sample_inputs(&inputs, seeds, ddim, Some(&inj))
    }

    /// One AdamW step on the control branch; the base stays frozen.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        batch: &TemporalBatch,
        rng: &mut R,
        opt: &mut AdamW,
    ) -> Result<f64> {
        let prepared = self.prepare(batch, rng)?;
        self.branch.zero_grad();
        let loss = self.loss_and_grad(batch, &prepared)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: opt.steps_taken() });
        }
        opt.step(&mut self.branch);
        Ok(loss)
    }

    /// Noise and timesteps for the batch targets (no conditioning dropout).
    pub fn prepare<R: Rng + ?Sized>(&self, batch: &TemporalBatch, rng: &mut R) -> Result<PreparedBatch> {
        let cfg = TrainConfig { p_full_drop: 0.0, p_slot_keep: 1.0, p_caption_drop: 0.0, ..Default::default() };
        let refs: Vec<&TrainingExample> = batch.targets.iter().collect();
        self.base.prepare_batch(&refs, rng, &cfg)
    }

    /// Loss with gradients accumulated into the branch.
    pub fn loss_and_grad(&mut self, batch: &TemporalBatch, prepared: &PreparedBatch) -> Result<f64> {
        let n = batch.targets.len();
        let s = self.base.config.image_size;
        let (f, m) = (&batch.frames, &batch.frame_m);
        let (feats, cache) = self.branch.encode_frames(f, m, batch.frame_owner.len())?;

        // pool per item, remembering which frames contributed
        let (l1, l2) = (feats.level1.len() / feats.n, feats.level2.len() / feats.n);
        let mut pooled = FrameFeatures { n, level1: Vec::with_capacity(n * l1), level2: Vec::with_capacity(n * l2) };
        let mut members_of = Vec::with_capacity(n);
        for item in 0..n {
            let idx: Vec<usize> = (0..feats.n).filter(|&k| batch.frame_owner[k] == item).collect();
            let sub = FrameFeatures {
                n: idx.len(),
                level1: idx.iter().flat_map(|&k| feats.level1[k * l1..(k + 1) * l1].iter().copied()).collect(),
                level2: idx.iter().flat_map(|&k| feats.level2[k * l2..(k + 1) * l2].iter().copied()).collect(),
            };
            let members = pooled_members(&sub, &vec![false; idx.len()]);
            let agg = aggregate_sequence(&sub, &vec![false; idx.len()]);
            pooled.level1.extend(agg.level1);
            pooled.level2.extend(agg.level2);
            members_of.push(members.into_iter().map(|j| idx[j]).collect::<Vec<_>>());
        }

        let (p1, p2) = self.branch.project(&pooled);
        let (a1, a2) = (self.branch.gates.alpha.value[0], self.branch.gates.alpha.value[1]);
        let inj = Injection {
            level1: Some(p1.iter().map(|v| a1 * v).collect()),
            level2: Some(p2.iter().map(|v| a2 * v).collect()),
        };
        let (loss, grads) = self.base.injection_loss_and_grad(prepared, &inj)?;

        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        self.branch.gates.alpha.grad[0] += dot(&grads.d_level1, &p1);
        self.branch.gates.alpha.grad[1] += dot(&grads.d_level2, &p2);
        let dp1: Vec<f64> = grads.d_level1.iter().map(|v| a1 * v).collect();
        let dp2: Vec<f64> = grads.d_level2.iter().map(|v| a2 * v).collect();
        let dpool1 = self.branch.inj1.backward(&pooled.level1, &dp1, n, s, s, true).unwrap();
        let dpool2 = self.branch.inj2.backward(&pooled.level2, &dp2, n, s / 2, s / 2, true).unwrap();

        let mut d1 = vec![0.0; feats.level1.len()];
        let mut d2 = vec![0.0; feats.level2.len()];
        for (item, members) in members_of.iter().enumerate() {
            let k = members.len() as f64;
            for &fi in members {
                d1[fi * l1..(fi + 1) * l1]
                    .iter_mut()
                    .zip(&dpool1[item * l1..(item + 1) * l1])
                    .for_each(|(a, b)| *a += b / k);
                d2[fi * l2..(fi + 1) * l2]
                    .iter_mut()
                    .zip(&dpool2[item * l2..(item + 1) * l2])
                    .for_each(|(a, b)| *a += b / k);
            }
        }
        self.branch.backward_frames(&cache, &d1, &d2);
        Ok(loss)
    }

    /// Trains the control branch for `cfg.iterations` steps on random items.
    pub fn train<R: Rng + ?Sized>(
        &mut self,
        data: &TemporalDataset,
        cfg: &TemporalTrainConfig,
        rng: &mut R,
        mut on_step: impl FnMut(usize, f64),
    ) -> Result<()> {
        if data.locations.is_empty() || cfg.batch_size == 0 {
            return Err(Error::InvalidConfig("temporal training needs multi-capture locations".into()));
        }
        let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
        for step in 0..cfg.iterations {
            let items: Vec<TemporalItem> = (0..cfg.batch_size).map(|_| data.sample_item(rng)).collect();
            let loss = self.train_step(&data.batch(&items), rng, &mut opt)?;
            on_step(step, loss);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = self.base.to_bytes()?;
        let header = serde_json::to_string(&TemporalHeader {
            config: self.branch.config,
            base_sha256: sha256_hex(&out),
        })?;
        write_container(&mut out, &Container::from_params(TEMPORAL_MAGIC, header, &self.branch));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (base, end) = ConditionalModel::from_bytes(bytes)?;
        let (container, rest) = read_container(bytes, end)?;
        if container.magic != TEMPORAL_MAGIC {
            return Err(Error::format("temporal checkpoint", "missing TCTL section"));
        }
        if rest != bytes.len() {
            return Err(Error::format("temporal checkpoint", "trailing bytes"));
        }
        let header: TemporalHeader = serde_json::from_str(&container.header)?;
        let hash = sha256_hex(&bytes[..end]);
        if hash != header.base_sha256 {
            return Err(Error::format("temporal checkpoint", "base checkpoint hash mismatch"));
        }
        let mut branch = ControlBranch::new(header.config, &base, &mut crate::rng::seeded(0));
        container.load_into(&mut branch)?;
        branch.check_finite()?;
        Ok(TemporalModel { base, branch, base_hash: hash })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// A training batch: target examples and their real conditioning frames,
/// flattened, with each frame's owner item and fused metadata vector.
#[derive(Debug, Clone)]
pub struct TemporalBatch {
    pub targets: Vec<TrainingExample>,
    pub frames: Vec<f64>,
    pub frame_m: Vec<f64>,
    pub frame_owner: Vec<usize>,
}

/// Whether the target precedes or follows its conditioning frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetPlacement {
    Past,
    Future,
}

/// One evaluation item: a target and the indices of its conditioning frames.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalItem {
    pub location: usize,
    pub target: usize,
    pub context: Vec<usize>,
}

/// Examples grouped by location and ordered by capture date. Locations with a
/// single capture are dropped.
#[derive(Debug, Clone)]
pub struct TemporalDataset {
    pub examples: Vec<TrainingExample>,
    /// Per location, example indices in date order.
    pub locations: Vec<Vec<usize>>,
    frame_m: Vec<Vec<f64>>,
}

fn date_key(r: &MetadataRecord) -> (i64, i64, i64) {
    let g = |k| r.get(k).unwrap_or(0.0) as i64;
    (g(AttributeKind::Year), g(AttributeKind::Month), g(AttributeKind::Day))
}

impl TemporalDataset {
    pub fn new(examples: Vec<TrainingExample>, base: &ConditionalModel) -> Result<Self> {
        let mut groups: BTreeMap<(u64, u64), Vec<usize>> = BTreeMap::new();
        for (i, ex) in examples.iter().enumerate() {
            let lat = ex.record.get(AttributeKind::Latitude).unwrap_or(f64::NAN);
            let lon = ex.record.get(AttributeKind::Longitude).unwrap_or(f64::NAN);
            groups.entry((lat.to_bits(), lon.to_bits())).or_default().push(i);
        }
        let locations: Vec<Vec<usize>> = groups
            .into_values()
            .filter(|g| g.len() >= 2)
            .map(|mut g| {
                g.sort_by_key(|&i| (date_key(&examples[i].record), i));
                g
            })
            .collect();
        let frame_m = examples
            .iter()
            .map(|ex| base.metadata_embedding(&ex.record))
            .collect::<Result<Vec<_>>>()?;
        Ok(TemporalDataset { examples, locations, frame_m })
    }

    /// Random target and up to three other captures from a random location.
    pub fn sample_item<R: Rng + ?Sized>(&self, rng: &mut R) -> TemporalItem {
        let location = rng.random_range(0..self.locations.len());
        let group = &self.locations[location];
        let target = *group.choose(rng).unwrap();
        let mut others: Vec<usize> = group.iter().copied().filter(|&i| i != target).collect();
        others.shuffle(rng);
        others.truncate(MAX_FRAMES);
        TemporalItem { location, target, context: others }
    }

    /// Items whose target is before (`Past`) or after (`Future`) all of its
    /// three neighbouring conditioning captures, over every location.
    pub fn placement_items(&self, placement: TargetPlacement) -> Vec<TemporalItem> {
        let mut out = Vec::new();
        for (location, group) in self.locations.iter().enumerate() {
            let k = MAX_FRAMES.min(group.len() - 1);
            for pos in 0..group.len() {
                let context: Vec<usize> = match placement {
                    TargetPlacement::Past if pos + k < group.len() => group[pos + 1..=pos + k].to_vec(),
                    TargetPlacement::Future if pos >= k => group[pos - k..pos].to_vec(),
                    _ => continue,
                };
                out.push(TemporalItem { location, target: group[pos], context });
            }
        }
        out
    }

    pub fn sequence(&self, context: &[usize]) -> Result<ConditioningSequence> {
        ConditioningSequence::new(
            context.iter().map(|&i| self.examples[i].image.clone()).collect(),
            context.iter().map(|&i| self.examples[i].record.clone()).collect(),
        )
    }

    pub fn batch(&self, items: &[TemporalItem]) -> TemporalBatch {
        let mut b = TemporalBatch {
            targets: Vec::with_capacity(items.len()),
            frames: Vec::new(),
            frame_m: Vec::new(),
            frame_owner: Vec::new(),
        };
        for (k, item) in items.iter().enumerate() {
            b.targets.push(self.examples[item.target].clone());
            for &f in &item.context {
                b.frames.extend_from_slice(&self.examples[f].image.data);
                b.frame_m.extend_from_slice(&self.frame_m[f]);
                b.frame_owner.push(k);
            }
        }
        b
    }
}
