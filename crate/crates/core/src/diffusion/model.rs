//! The full conditional model: metadata encoder, fusion, caption embedding
//! and denoiser, trained jointly on the noise-prediction objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::denoiser::{Denoiser, DenoiserConfig, DenoiserGrads, Injection};
use super::sampler::{ddim_sample, Branch, DdimConfig, NoisePredictor};
use super::schedule::{DiffusionSchedule, ScheduleConfig};
use crate::caption::{render_caption, Caption, Vocabulary};
use crate::error::{Error, Result};
use crate::fusion::{
    fuse_additive, fuse_concat, make_conditioning, sample_dropout_mask, ConditioningPacket,
    EmbeddingBundle, FusionProjector, FusionStrategy,
};
use crate::image::ImageTensor;
use crate::metadata::{
    sinusoidal_project_batch, AttributeRanges, ClampCounter, EncoderConfig, MetadataEncoder,
    MetadataRecord, NUM_ATTRIBUTES,
};
use crate::nn::{AdamW, MlpCache, Param, Parameterized};
use crate::rng::{normal_vec, seeded};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fusion: FusionStrategy,
    pub fusion_hidden: usize,
    pub caption_dim: usize,
    pub channels: usize,
    pub image_size: usize,
    pub base_channels: usize,
    pub mid_channels: usize,
    pub schedule: ScheduleConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            fusion: FusionStrategy::ConcatProject,
            fusion_hidden: 256,
            caption_dim: 64,
            channels: 3,
            image_size: 32,
            base_channels: 16,
            mid_channels: 32,
            schedule: ScheduleConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            channels: self.channels,
            size: self.image_size,
            base: self.base_channels,
            mid: self.mid_channels,
            cond_dim: self.encoder.embed_dim + self.caption_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.sinusoid.validate()?;
        if self.image_size == 0 || !self.image_size.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "image size must be even, got {}",
                self.image_size
            )));
        }
        if self.encoder.embed_dim == 0 || self.caption_dim == 0 || self.channels == 0 {
            return Err(Error::InvalidConfig("dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub p_full_drop: f64,
    pub p_slot_keep: f64,
    pub p_caption_drop: f64,
    /// Decay of the weight average that replaces the trained weights at the
    /// end; 0 keeps the raw weights.
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            iterations: 20_000,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            p_full_drop: 0.1,
            p_slot_keep: 0.9,
            p_caption_drop: 0.1,
            ema_decay: 0.999,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub image: ImageTensor,
    pub record: MetadataRecord,
    pub caption: Caption,
}

/// Conditioning for one sampled image: raw metadata (absent attributes are
/// simply not present) and caption text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleCondition {
    pub record: MetadataRecord,
    pub caption: String,
}

/// Model-ready conditioning for one item.
#[derive(Debug, Clone, PartialEq)]
pub struct CondInput {
    pub normalized: [f64; NUM_ATTRIBUTES],
    pub mask: [bool; NUM_ATTRIBUTES],
    pub caption_ids: Vec<usize>,
}

impl CondInput {
    pub fn unconditional() -> Self {
        CondInput {
            normalized: [0.0; NUM_ATTRIBUTES],
            mask: [false; NUM_ATTRIBUTES],
            caption_ids: Vec::new(),
        }
    }
}

/// A fully specified training batch (noise, timesteps and masks already
/// drawn), so the loss is a deterministic function of the parameters.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub z0: Vec<f64>,
    pub timesteps: Vec<usize>,
    pub eps: Vec<f64>,
    pub cond: Vec<CondInput>,
}

impl PreparedBatch {
    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }
}

struct MetaCache {
    n: usize,
    per_attribute: Vec<(Vec<usize>, MlpCache)>,
    projector: Option<MlpCache>,
}

struct CondCache {
    meta: MetaCache,
    timestep: MlpCache,
}

#[derive(Debug, Clone)]
pub struct ConditionalModel {
    pub config: ModelConfig,
    pub ranges: AttributeRanges,
    pub encoder: MetadataEncoder,
    pub projector: Option<FusionProjector>,
    pub vocab: Vocabulary,
    pub denoiser: Denoiser,
    schedule: DiffusionSchedule,
    clamped: ClampCounter,
}

impl ConditionalModel {
    pub fn new<'a, R: Rng + ?Sized>(
        config: ModelConfig,
        ranges: AttributeRanges,
        caption_corpus: impl IntoIterator<Item = &'a str>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let encoder = MetadataEncoder::new(config.encoder, rng)?;
        let projector = match config.fusion {
            FusionStrategy::ConcatProject => Some(FusionProjector::new(
                config.encoder.embed_dim,
                config.fusion_hidden,
                rng,
            )),
            FusionStrategy::Additive => None,
        };
        let vocab = Vocabulary::build(caption_corpus, config.caption_dim, rng);
        let denoiser = Denoiser::new(config.denoiser(), rng);
        Self::from_parts(config, ranges, encoder, projector, vocab, denoiser)
    }

    pub fn from_parts(
        config: ModelConfig,
        ranges: AttributeRanges,
        encoder: MetadataEncoder,
        projector: Option<FusionProjector>,
        vocab: Vocabulary,
        denoiser: Denoiser,
    ) -> Result<Self> {
        config.validate()?;
        if projector.is_some() != (config.fusion == FusionStrategy::ConcatProject) {
            return Err(Error::InvalidConfig(
                "fusion projector presence does not match the fusion strategy".into(),
            ));
        }
        if vocab.dim() != config.caption_dim {
            return Err(Error::DimensionMismatch {
                context: "caption embedding",
                expected: config.caption_dim,
                actual: vocab.dim(),
            });
        }
        let schedule = DiffusionSchedule::from_config(&config.schedule)?;
        Ok(ConditionalModel {
            config,
            ranges,
            encoder,
            projector,
            vocab,
            denoiser,
            schedule,
            clamped: ClampCounter::default(),
        })
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn embed_dim(&self) -> usize {
        self.config.encoder.embed_dim
    }

    pub fn image_len(&self) -> usize {
        self.config.denoiser().image_len()
    }

    /// Number of values clamped into their normalization range so far.
    pub fn clamped_values(&self) -> u64 {
        self.clamped.get()
    }

    pub fn cond_input(&self, record: &MetadataRecord, caption: &str) -> CondInput {
        CondInput {
            normalized: self.ranges.normalize_record(record, &self.clamped),
            mask: record.present,
            caption_ids: self.vocab.token_ids(caption),
        }
    }

    /// Per-attribute embeddings of one item as a bundle.
    pub fn bundle(&self, input: &CondInput) -> Result<EmbeddingBundle> {
        let d = self.embed_dim();
        let slots = (0..NUM_ATTRIBUTES)
            .map(|j| {
                if input.mask[j] {
                    self.encoder.embed_attribute(input.normalized[j], j)
                } else {
                    Ok(vec![0.0; d])
                }
            })
            .collect::<Result<Vec<_>>>()?;
        EmbeddingBundle::new(slots, input.mask)
    }

    /// Fused metadata vector of one item.
    pub fn fuse(&self, bundle: &EmbeddingBundle) -> Result<Vec<f64>> {
        match &self.projector {
            Some(p) => fuse_concat(bundle, p),
            None => Ok(fuse_additive(bundle)),
        }
    }

    /// The packet the denoiser consumes for one item at timestep `t`.
    pub fn packet(&self, input: &CondInput, t: usize) -> Result<ConditioningPacket> {
        let m = self.fuse(&self.bundle(input)?)?;
        let t_emb = self.encoder.embed_timestep(t)?;
        let caption = self.vocab.embed_ids(&input.caption_ids);
        make_conditioning(&m, &t_emb, &caption, self.config.fusion)
    }

    /// Noise prediction for a batch of packets (one per item).
    pub fn predict_noise_packets(
        &self,
        z_t: &[f64],
        packets: &[ConditioningPacket],
        ts: &[usize],
    ) -> Result<Vec<f64>> {
        let mut u = Vec::with_capacity(packets.len() * self.config.denoiser().cond_dim);
        for p in packets {
            if p.strategy != self.config.fusion {
                return Err(Error::InvalidConfig("packet built for another fusion strategy".into()));
            }
            u.extend_from_slice(&p.c);
            u.extend_from_slice(&p.caption_embedding);
        }
        self.check_batch(z_t, packets.len())?;
        let out = self.denoiser.forward(z_t, &u, packets.len(), None);
        Ok(self.with_skip(out, z_t, ts))
    }

    /// Adds the fixed `sigma_t * z_t` term, so the network only models the
    /// residual. Near pure noise the residual is close to zero.
    fn with_skip(&self, mut out: Vec<f64>, z_t: &[f64], ts: &[usize]) -> Vec<f64> {
        let len = self.image_len();
        for ((o, z), &t) in out.chunks_exact_mut(len).zip(z_t.chunks_exact(len)).zip(ts) {
            let s = self.schedule.sigma(t);
            o.iter_mut().zip(z).for_each(|(o, z)| *o += s * z);
        }
        out
    }

    fn check_batch(&self, z: &[f64], n: usize) -> Result<()> {
        if z.len() != n * self.image_len() {
            return Err(Error::DimensionMismatch {
                context: "denoiser input batch",
                expected: n * self.image_len(),
                actual: z.len(),
            });
        }
        Ok(())
    }

    fn metadata_forward(&self, inputs: &[CondInput]) -> (Vec<f64>, MetaCache) {
        let n = inputs.len();
        let d = self.embed_dim();
        let sin = &self.config.encoder.sinusoid;
        let mut per_attribute = Vec::with_capacity(NUM_ATTRIBUTES);
        let mut m = vec![0.0; n * d];
        let mut concat = self
            .projector
            .as_ref()
            .map(|_| vec![0.0; n * NUM_ATTRIBUTES * d]);
        for j in 0..NUM_ATTRIBUTES {
            let rows: Vec<usize> = (0..n).filter(|&i| inputs[i].mask[j]).collect();
            let ks: Vec<f64> = rows.iter().map(|&i| inputs[i].normalized[j]).collect();
            let proj = sinusoidal_project_batch(&ks, sin);
            let (emb, cache) = self.encoder.attributes[j].forward_cached(&proj, rows.len());
            for (r, &i) in rows.iter().enumerate() {
                let src = &emb[r * d..(r + 1) * d];
                match concat.as_mut() {
                    Some(buf) => {
                        let off = (i * NUM_ATTRIBUTES + j) * d;
                        buf[off..off + d].copy_from_slice(src);
                    }
                    None => m[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, b)| *a += b),
                }
            }
            per_attribute.push((rows, cache));
        }
        let projector = match (&self.projector, concat) {
            (Some(p), Some(buf)) => {
                let (out, cache) = p.project_cached(&buf, n);
                m = out;
                Some(cache)
            }
            _ => None,
        };
        (
            m,
            MetaCache {
                n,
                per_attribute,
                projector,
            },
        )
    }

    fn metadata_backward(&mut self, cache: &MetaCache, dm: &[f64]) {
        let d = self.embed_dim();
        let dconcat = match (&mut self.projector, &cache.projector) {
            (Some(p), Some(pc)) => Some(p.backward(pc, dm)),
            _ => None,
        };
        for (j, (rows, mlp_cache)) in cache.per_attribute.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let mut demb = Vec::with_capacity(rows.len() * d);
            for &i in rows {
                match &dconcat {
                    Some(dc) => {
                        let off = (i * NUM_ATTRIBUTES + j) * d;
                        demb.extend_from_slice(&dc[off..off + d]);
                    }
                    None => demb.extend_from_slice(&dm[i * d..(i + 1) * d]),
                }
            }
            self.encoder.attributes[j].backward(mlp_cache, &demb);
        }
        debug_assert_eq!(dm.len(), cache.n * d);
    }

    fn timestep_forward(&self, ts: &[usize]) -> (Vec<f64>, MlpCache) {
        let ks: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
        let proj = sinusoidal_project_batch(&ks, &self.config.encoder.sinusoid);
        self.encoder.timestep.forward_cached(&proj, ts.len())
    }

    fn captions(&self, inputs: &[CondInput]) -> Vec<f64> {
        inputs
            .iter()
            .flat_map(|c| self.vocab.embed_ids(&c.caption_ids))
            .collect()
    }

    fn assemble(&self, m: &[f64], t_emb: &[f64], caption: &[f64], n: usize) -> Vec<f64> {
        let (d, e) = (self.embed_dim(), self.config.caption_dim);
        let mut u = Vec::with_capacity(n * (d + e));
        for i in 0..n {
            u.extend(
                m[i * d..(i + 1) * d]
                    .iter()
                    .zip(&t_emb[i * d..(i + 1) * d])
                    .map(|(a, b)| a + b),
            );
            u.extend_from_slice(&caption[i * e..(i + 1) * e]);
        }
        u
    }

    fn condition_forward(&self, inputs: &[CondInput], ts: &[usize]) -> (Vec<f64>, CondCache) {
        let (m, meta) = self.metadata_forward(inputs);
        let (t_emb, timestep) = self.timestep_forward(ts);
        let caption = self.captions(inputs);
        (
            self.assemble(&m, &t_emb, &caption, inputs.len()),
            CondCache { meta, timestep },
        )
    }

    fn condition_backward(&mut self, cache: &CondCache, inputs: &[CondInput], du: &[f64]) {
        let (d, e) = (self.embed_dim(), self.config.caption_dim);
        let n = inputs.len();
        let mut dc = Vec::with_capacity(n * d);
        for (i, input) in inputs.iter().enumerate() {
            let row = &du[i * (d + e)..(i + 1) * (d + e)];
            dc.extend_from_slice(&row[..d]);
            self.vocab.backward(&input.caption_ids, &row[d..]);
        }
        self.encoder.timestep.backward(&cache.timestep, &dc);
        self.metadata_backward(&cache.meta, &dc);
    }

    /// Noise prediction for items with per-item timesteps.
    pub fn predict_noise(
        &self,
        z_t: &[f64],
        inputs: &[CondInput],
        ts: &[usize],
        inj: Option<&Injection>,
    ) -> Result<Vec<f64>> {
        self.check_batch(z_t, inputs.len())?;
        let (u, _) = self.condition_forward(inputs, ts);
        let out = self.denoiser.forward(z_t, &u, inputs.len(), inj);
        Ok(self.with_skip(out, z_t, ts))
    }

    fn noisy(&self, batch: &PreparedBatch) -> Vec<f64> {
        let len = self.image_len();
        let mut z_t = Vec::with_capacity(batch.z0.len());
        for (i, &t) in batch.timesteps.iter().enumerate() {
            let (a, s) = (self.schedule.alpha(t), self.schedule.sigma(t));
            let span = i * len..(i + 1) * len;
            z_t.extend(
                batch.z0[span.clone()]
                    .iter()
                    .zip(&batch.eps[span])
                    .map(|(x, e)| a * x + s * e),
            );
        }
        z_t
    }

    /// Mean squared noise-prediction error of a prepared batch.
    pub fn loss(&self, batch: &PreparedBatch) -> Result<f64> {
        let pred = self.predict_noise(&self.noisy(batch), &batch.cond, &batch.timesteps, None)?;
        Ok(mse(&pred, &batch.eps))
    }

    /// Loss plus accumulated gradients for every trainable parameter.
    pub fn loss_and_grad(&mut self, batch: &PreparedBatch) -> Result<f64> {
        let z_t = self.noisy(batch);
        self.check_batch(&z_t, batch.len())?;
        let (u, cond_cache) = self.condition_forward(&batch.cond, &batch.timesteps);
        let (pred, cache) = self.denoiser.forward_cached(&z_t, &u, batch.len(), None);
        let pred = self.with_skip(pred, &z_t, &batch.timesteps);
        let loss = mse(&pred, &batch.eps);
        let scale = 2.0 / pred.len() as f64;
        let dpred: Vec<f64> = pred
            .iter()
            .zip(&batch.eps)
            .map(|(p, e)| scale * (p - e))
            .collect();
        let grads = self.denoiser.backward(&cache, &dpred);
        self.condition_backward(&cond_cache, &batch.cond, &grads.du);
        Ok(loss)
    }

    /// Loss of a batch whose denoiser activations receive `inj`, plus the
    /// gradients with respect to the injected maps. Base parameter gradients
    /// are cleared afterwards, so the base stays untouched by an optimizer.
    pub fn injection_loss_and_grad(
        &mut self,
        batch: &PreparedBatch,
        inj: &Injection,
    ) -> Result<(f64, DenoiserGrads)> {
        let z_t = self.noisy(batch);
        self.check_batch(&z_t, batch.len())?;
        let (u, _) = self.condition_forward(&batch.cond, &batch.timesteps);
        let (pred, cache) = self.denoiser.forward_cached(&z_t, &u, batch.len(), Some(inj));
        let pred = self.with_skip(pred, &z_t, &batch.timesteps);
        let loss = mse(&pred, &batch.eps);
        let scale = 2.0 / pred.len() as f64;
        let dpred: Vec<f64> = pred
            .iter()
            .zip(&batch.eps)
            .map(|(p, e)| scale * (p - e))
            .collect();
        let grads = self.denoiser.backward(&cache, &dpred);
        self.zero_grad();
        Ok((loss, grads))
    }

    pub fn loss_with_injection(&self, batch: &PreparedBatch, inj: Option<&Injection>) -> Result<f64> {
        let pred = self.predict_noise(&self.noisy(batch), &batch.cond, &batch.timesteps, inj)?;
        Ok(mse(&pred, &batch.eps))
    }

    /// Fused metadata vector `m` of one record (no dropout).
    pub fn metadata_embedding(&self, record: &MetadataRecord) -> Result<Vec<f64>> {
        self.fuse(&self.bundle(&self.cond_input(record, ""))?)
    }

    /// Draws timesteps, noise, metadata dropout and caption word dropout.
    pub fn prepare_batch<R: Rng + ?Sized>(
        &self,
        examples: &[&TrainingExample],
        rng: &mut R,
        cfg: &TrainConfig,
    ) -> Result<PreparedBatch> {
        let len = self.image_len();
        let mut batch = PreparedBatch {
            z0: Vec::with_capacity(examples.len() * len),
            timesteps: Vec::with_capacity(examples.len()),
            eps: Vec::with_capacity(examples.len() * len),
            cond: Vec::with_capacity(examples.len()),
        };
        for ex in examples {
            if ex.image.len() != len {
                return Err(Error::DimensionMismatch {
                    context: "training image",
                    expected: len,
                    actual: ex.image.len(),
                });
            }
            batch.z0.extend_from_slice(&ex.image.data);
            batch.timesteps.push(rng.random_range(0..self.schedule.len()));
            batch.eps.extend(normal_vec(rng, len));
            let drop = sample_dropout_mask(rng, cfg.p_full_drop, cfg.p_slot_keep);
            let text = render_caption(&ex.caption, rng, cfg.p_caption_drop);
            let mut input = self.cond_input(&ex.record, &text);
            for (m, keep) in input.mask.iter_mut().zip(drop) {
                *m &= keep;
            }
            batch.cond.push(input);
        }
        Ok(batch)
    }

    /// One AdamW step on a freshly drawn batch. Returns the pre-update loss.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        examples: &[&TrainingExample],
        rng: &mut R,
        opt: &mut AdamW,
        cfg: &TrainConfig,
    ) -> Result<f64> {
        let batch = self.prepare_batch(examples, rng, cfg)?;
        self.zero_grad();
        let loss = self.loss_and_grad(&batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: opt.steps_taken(),
            });
        }
        opt.step(self);
        Ok(loss)
    }

    /// DDIM samples, one per condition, each starting from the noise drawn
    /// with its own seed.
    pub fn sample(
        &self,
        conditions: &[SampleCondition],
        seeds: &[u64],
        ddim: &DdimConfig,
    ) -> Result<Vec<ImageTensor>> {
        let inputs: Vec<CondInput> = conditions
            .iter()
            .map(|c| self.cond_input(&c.record, &c.caption))
            .collect();
        self.sample_inputs(&inputs, seeds, ddim, None)
    }

    pub fn sample_inputs(
        &self,
        inputs: &[CondInput],
        seeds: &[u64],
        ddim: &DdimConfig,
        injection: Option<&Injection>,
    ) -> Result<Vec<ImageTensor>> {
        if inputs.len() != seeds.len() {
            return Err(Error::DimensionMismatch {
                context: "sample seeds",
                expected: inputs.len(),
                actual: seeds.len(),
            });
        }
        let len = self.image_len();
        let noise: Vec<f64> = seeds
            .iter()
            .flat_map(|&s| self.initial_noise(s))
            .collect();
        let predictor = ModelPredictor::new(self, inputs, injection);
        let out = ddim_sample(&predictor, &self.schedule, noise, ddim)?;
        let (c, s) = (self.config.channels, self.config.image_size);
        out.chunks_exact(len)
            .map(|chunk| ImageTensor::new(c, s, s, chunk.to_vec()))
            .collect()
    }

    pub fn initial_noise(&self, seed: u64) -> Vec<f64> {
        normal_vec(&mut seeded(seed), self.image_len())
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

impl Parameterized for ConditionalModel {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.encoder.visit(f);
        if let Some(p) = &self.projector {
            p.visit(f);
        }
        self.vocab.visit(f);
        self.denoiser.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoder.visit_mut(f);
        if let Some(p) = &mut self.projector {
            p.visit_mut(f);
        }
        self.vocab.visit_mut(f);
        self.denoiser.visit_mut(f);
    }
}

/// Adapts a model and fixed per-item conditioning to the sampler. The fused
/// metadata and caption embeddings do not depend on the timestep and are
/// computed once.
pub struct ModelPredictor<'a> {
    model: &'a ConditionalModel,
    n: usize,
    cond: (Vec<f64>, Vec<f64>),
    uncond: (Vec<f64>, Vec<f64>),
    injection: Option<&'a Injection>,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(
        model: &'a ConditionalModel,
        inputs: &[CondInput],
        injection: Option<&'a Injection>,
    ) -> Self {
        let n = inputs.len();
        let uncond_inputs = vec![CondInput::unconditional(); n];
        let embed = |inputs: &[CondInput]| (model.metadata_forward(inputs).0, model.captions(inputs));
        ModelPredictor {
            model,
            n,
            cond: embed(inputs),
            uncond: embed(&uncond_inputs),
            injection,
        }
    }
}

impl NoisePredictor for ModelPredictor<'_> {
    fn predict(&self, z_t: &[f64], t: usize, branch: Branch) -> Result<Vec<f64>> {
        self.model.check_batch(z_t, self.n)?;
        let (m, caption) = match branch {
            Branch::Conditional => &self.cond,
            Branch::Unconditional => &self.uncond,
        };
        let (t_emb, _) = self.model.timestep_forward(&vec![t; self.n]);
        let u = self.model.assemble(m, &t_emb, caption, self.n);
        let out = self.model.denoiser.forward(z_t, &u, self.n, self.injection);
        Ok(self.model.with_skip(out, z_t, &vec![t; self.n]))
    }
}
