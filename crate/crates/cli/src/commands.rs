use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use geodiff::dataset::{build_manifest, load_training_examples, read_stubs, BuildOptions, DatasetManifest, GridIndex};
use geodiff::diffusion::{
    train_model, ConditionalModel, DdimConfig, ModelConfig, SampleCondition, TrainConfig, TrainingExample,
};
use geodiff::fusion::FusionStrategy;
use geodiff::image::{read_png, write_png, ImageTensor};
use geodiff::metadata::{AttributeKind, EncoderConfig, MetadataEncoder, MetadataRecord};
use geodiff::metrics::{
    fidelity_probe, moment_distance, psnr, recoverability_probe, ssim, MetricReport, MomentOptions, PairScore,
    ProbeFusion, RecoverabilityConfig,
};
use geodiff::rng::derive;
use geodiff::temporal::{ConditioningSequence, TemporalConfig, TemporalDataset, TemporalModel, TemporalTrainConfig, MAX_FRAMES};
use geodiff::world::{make_world as generate_world, WorldConfig};

use crate::config::{resolve, run_args, Common};
use crate::{invalid, CmdResult};

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct MakeWorldArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    /// Number of images.
    #[arg(long, default_value_t = 4000)]
    images: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    /// Captures per location.
    #[arg(long, default_value_t = 8)]
    per_location: usize,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct BuildDatasetArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    /// World directory holding `stubs.jsonl` and `grid/`.
    #[arg(long)]
    world: Option<PathBuf>,
    /// Stub file (overrides the world's).
    #[arg(long)]
    stubs: Option<PathBuf>,
    /// Grid directory (overrides the world's).
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Probability of dropping each caption clause.
    #[arg(long, default_value_t = 0.0)]
    caption_drop: f64,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct DataArgs {
    /// Manifest written by build-dataset.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory the manifest's image paths are relative to.
    #[arg(long)]
    images: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    data: DataArgs,
    /// Optimizer steps.
    #[arg(long, default_value_t = 20_000)]
    steps: u64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    /// Metadata fusion: `concat` or `add`.
    #[arg(long, default_value = "concat", value_parser = parse_fusion)]
    fusion: FusionStrategy,
    /// Probability of zeroing the whole metadata bundle.
    #[arg(long, default_value_t = 0.1)]
    p_full_drop: f64,
    /// Per-attribute keep probability.
    #[arg(long, default_value_t = 0.9)]
    p_slot_keep: f64,
    /// Caption clause drop probability.
    #[arg(long, default_value_t = 0.1)]
    p_caption_drop: f64,
    /// Decay of the weight average saved at the end; 0 saves the raw weights.
    #[arg(long, default_value_t = 0.999)]
    ema_decay: f64,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SamplingArgs {
    /// Attribute value in raw units, e.g. `tcc=0.7` (repeatable; omitted
    /// attributes are treated as missing).
    #[arg(long = "meta")]
    meta: Vec<String>,
    #[arg(long, default_value = "")]
    prompt: String,
    /// DDIM steps.
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 1.0)]
    guidance: f64,
    /// Images to draw; image i uses seed + i.
    #[arg(long, default_value_t = 1)]
    count: usize,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SampleArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    sampling: SamplingArgs,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainTemporalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    /// Base model checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 4000)]
    steps: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 4e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SampleTemporalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    /// Temporal checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Conditioning frame PNGs (at most three).
    #[arg(long = "frames", num_args = 1..)]
    frames: Vec<PathBuf>,
    /// Metadata of the matching frame as `key=value,key=value` (repeatable).
    #[arg(long = "frame-meta")]
    frame_meta: Vec<String>,
    #[command(flatten)]
    #[serde(flatten)]
    sampling: SamplingArgs,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EvaluateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    /// Directory of reference PNGs.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Directory of generated PNGs; pairs are matched by file name.
    #[arg(long)]
    generated: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ProbeFusionArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    /// Model whose attribute MLPs are probed; a fresh encoder otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "add,concat")]
    strategies: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,3,5,7")]
    missing: Vec<usize>,
    /// Paired trials per missing count.
    #[arg(long, default_value_t = 1)]
    trials: usize,
    #[arg(long, default_value_t = 1200)]
    n_train: usize,
    #[arg(long, default_value_t = 200)]
    n_test: usize,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ProbeFidelityArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Swept attribute: tcc, ssr or tp.
    #[arg(long, default_value = "tcc")]
    attribute: String,
    /// Sweep start in raw units.
    #[arg(long, default_value_t = 0.0)]
    from: f64,
    /// Sweep end in raw units.
    #[arg(long, default_value_t = 1.0)]
    to: f64,
    #[arg(long, default_value_t = 11)]
    points: usize,
    /// Noise seeds per sweep value (seed, seed + 1, ...).
    #[arg(long, default_value_t = 8)]
    seeds: usize,
    /// Base metadata for the other attributes.
    #[arg(long = "meta")]
    meta: Vec<String>,
    #[arg(long, default_value = "")]
    prompt: String,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 1.0)]
    guidance: f64,
}

run_args! {
    MakeWorldArgs => "make-world",
    BuildDatasetArgs => "build-dataset",
    TrainArgs => "train",
    SampleArgs => "sample",
    TrainTemporalArgs => "train-temporal",
    SampleTemporalArgs => "sample-temporal",
    EvaluateArgs => "evaluate",
    ProbeFusionArgs => "probe-fusion",
    ProbeFidelityArgs => "probe-fidelity",
}

fn parse_fusion(s: &str) -> Result<FusionStrategy, String> {
    s.parse().map_err(|e: geodiff::Error| e.to_string())
}

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> CmdResult<&'a T> {
    v.as_ref().ok_or_else(|| invalid(format!("{flag} is required")))
}

fn parse_pairs<'a>(items: impl IntoIterator<Item = &'a str>) -> CmdResult<MetadataRecord> {
    let mut record = MetadataRecord::empty();
    for item in items {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| invalid(format!("expected key=value, got '{item}'")))?;
        let kind: AttributeKind = key.trim().parse()?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| invalid(format!("bad value for {key}: '{value}'")))?;
        record.set(kind, value);
    }
    record.validate()?;
    Ok(record)
}

fn parse_meta(meta: &[String]) -> CmdResult<MetadataRecord> {
    parse_pairs(meta.iter().map(String::as_str))
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text)?;
    Ok(())
}

fn load_data(data: &DataArgs, crop: usize) -> CmdResult<(DatasetManifest, Vec<TrainingExample>)> {
    let manifest = DatasetManifest::read(required(&data.manifest, "--manifest")?)?;
    let examples = load_training_examples(&manifest, required(&data.images, "--images")?, crop)?;
    if examples.is_empty() {
        return Err(invalid("the manifest has no records"));
    }
    Ok((manifest, examples))
}

fn loss_log(path: &Path) -> CmdResult<impl FnMut(u64, f64) + use<>> {
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(file, "step,loss")?;
    Ok(move |step: u64, loss: f64| {
        let _ = writeln!(file, "{},{}", step + 1, loss);
    })
}

#[derive(Serialize)]
struct Sidecar<'a> {
    image: String,
    seed: u64,
    prompt: &'a str,
    record: &'a MetadataRecord,
    steps: usize,
    guidance: f64,
}

fn write_samples(out: &Path, images: &[ImageTensor], seeds: &[u64], cond: &SampleCondition, s: &SamplingArgs) -> CmdResult {
    for (i, (image, &seed)) in images.iter().zip(seeds).enumerate() {
        let name = format!("sample_{i:03}");
        write_png(&out.join(format!("{name}.png")), image)?;
        let sidecar = Sidecar {
            image: format!("{name}.png"),
            seed,
            prompt: &cond.caption,
            record: &cond.record,
            steps: s.steps,
            guidance: s.guidance,
        };
        write_text(&out.join(format!("{name}.json")), &(serde_json::to_string_pretty(&sidecar)? + "\n"))?;
    }
    Ok(())
}

fn ddim(steps: usize, guidance: f64) -> DdimConfig {
    DdimConfig { steps, guidance, clip_denoised: true }
}

pub fn make_world(args: MakeWorldArgs) -> CmdResult {
    let (args, out) = resolve(args)?;
    let cfg = WorldConfig {
        seed: args.common.seed,
        image_size: args.image_size,
        images_per_location: args.per_location,
        ..Default::default()
    };
    let world = generate_world(args.images, &cfg, &mut derive(args.common.seed, 1))?;
    world.write(&out)?;
    eprintln!("wrote {} images to {}", world.images.len(), out.display());
    Ok(())
}

pub fn build_dataset(args: BuildDatasetArgs) -> CmdResult {
    let (args, out) = resolve(args)?;
    let from_world = |name: &str| args.world.as_ref().map(|w| w.join(name));
    let stubs_path = args.stubs.clone().or_else(|| from_world("stubs.jsonl"));
    let grid_path = args.grid.clone().or_else(|| from_world("grid"));
    let stubs = read_stubs(required(&stubs_path, "--stubs or --world")?)?;
    let grid = GridIndex::read_dir(required(&grid_path, "--grid or --world")?)?;
    let opts = BuildOptions { caption_drop: args.caption_drop };
    let (manifest, skipped) = build_manifest(&stubs, &grid, &mut derive(args.common.seed, 2), &opts);
    manifest.write(&out.join("manifest.jsonl"))?;
    let summary: Vec<(String, String)> = skipped.skipped.iter().map(|(id, r)| (id.clone(), format!("{r:?}"))).collect();
    write_text(&out.join("skipped.json"), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    eprintln!("{} records, {} skipped", manifest.records.len(), summary.len());
    Ok(())
}

pub fn train(args: TrainArgs) -> CmdResult {
    let (args, out) = resolve(args)?;
    let (manifest, examples) = load_data(&args.data, args.image_size)?;
    let config = ModelConfig { fusion: args.fusion, image_size: args.image_size, ..Default::default() };
    let captions: Vec<&str> = manifest.records.iter().map(|r| r.caption.as_str()).collect();
    let mut model = ConditionalModel::new(config, manifest.ranges()?, captions, &mut derive(args.common.seed, 3))?;
    let cfg = TrainConfig {
        batch_size: args.batch,
        iterations: args.steps,
        learning_rate: args.lr,
        weight_decay: args.weight_decay,
        p_full_drop: args.p_full_drop,
        p_slot_keep: args.p_slot_keep,
        p_caption_drop: args.p_caption_drop,
        ema_decay: args.ema_decay,
    };
    let log = loss_log(&out.join("loss.csv"))?;
    train_model(&mut model, &examples, &cfg, &mut derive(args.common.seed, 4), log)?;
    model.save(&out.join("model.gdl"))?;
    Ok(())
}

fn sample_condition(s: &SamplingArgs) -> CmdResult<SampleCondition> {
    if s.count == 0 {
        return Err(invalid("--count must be positive"));
    }
    Ok(SampleCondition { record: parse_meta(&s.meta)?, caption: s.prompt.clone() })
}

pub fn sample(args: SampleArgs) -> CmdResult {
    let (args, out) = resolve(args)?;
    let model = ConditionalModel::load(required(&args.checkpoint, "--checkpoint")?)?;
    let cond = sample_condition(&args.sampling)?;
    let seeds: Vec<u64> = (0..args.sampling.count as u64).map(|i| args.common.seed.wrapping_add(i)).collect();
    let conds = vec![cond.clone(); seeds.len()];
    let images = model.sample(&conds, &seeds, &ddim(args.sampling.steps, args.sampling.guidance))?;
    write_samples(&out, &images, &seeds, &cond, &args.sampling)
}

pub fn train_temporal(args: TrainTemporalArgs) -> CmdResult {
    let (args, out) = resolve(args)?;
    let base = ConditionalModel::load(required(&args.checkpoint, "--checkpoint")?)?;
    let (_, examples) = load_data(&args.data, base.config.image_size)?;
    let data = TemporalDataset::new(examples, &base)?;
    let mut model = TemporalModel::new(base, TemporalConfig::default(), &mut derive(args.common.seed, 5))?;
    let cfg = TemporalTrainConfig {
        batch_size: args.batch,
        iterations: args.steps,
        learning_rate: args.lr,
        weight_decay: args.weight_decay,
    };
    let mut log = loss_log(&out.join("loss.csv"))?;
    model.train(&data, &cfg, &mut derive(args.common.seed, 6), |s, l| log(s as u64, l))?;
    model.save(&out.join("temporal.gdt"))?;
    Ok(())
}

pub fn sample_temporal(args: SampleTemporalArgs) -> CmdResult {
    let (args, out) = resolve(args)?;
    let model = TemporalModel::load(required(&args.checkpoint, "--checkpoint")?)?;
    if args.frames.is_empty() || args.frames.len() > MAX_FRAMES {
        return Err(invalid(format!("--frames takes 1 to {MAX_FRAMES} images")));
    }
    if args.frame_meta.len() > args.frames.len() {
        return Err(invalid("more --frame-meta values than frames"));
    }
    let size = model.base.config.image_size;
    let mut frames = Vec::with_capacity(args.frames.len());
    let mut records = Vec::with_capacity(args.frames.len());
    for (i, path) in args.frames.iter().enumerate() {
        let img = read_png(path)?;
        frames.push(if img.height == size && img.width == size { img } else { img.center_crop(size)? });
        records.push(match args.frame_meta.get(i) {
            Some(spec) => parse_pairs(spec.split(',').filter(|p| !p.trim().is_empty()))?,
            None => MetadataRecord::empty(),
        });
    }
    let cond = sample_condition(&args.sampling)?;
    let seeds: Vec<u64> = (0..args.sampling.count as u64).map(|i| args.common.seed.wrapping_add(i)).collect();
    let mut rng = derive(args.common.seed, 7);
    let sequence = ConditioningSequence::new(frames, records)?;
    let sequences: Vec<ConditioningSequence> = seeds.iter().map(|_| sequence.clone().padded(&mut rng)).collect();
    let conds = vec![cond.clone(); seeds.len()];
    let images = model.sample(&conds, &sequences, &seeds, &ddim(args.sampling.steps, args.sampling.guidance))?;
    write_samples(&out, &images, &seeds, &cond, &args.sampling)
}

fn png_names(dir: &Path) -> CmdResult<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

fn write_report(out: &Path, report: &MetricReport) -> CmdResult {
    write_text(&out.join("report.json"), &(report.to_json()? + "\n"))?;
    let text = report.to_text();
    write_text(&out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

pub fn evaluate(args: EvaluateArgs) -> CmdResult {
    let (args, out) = resolve(args)?;
    let (ref_dir, gen_dir) = (required(&args.reference, "--reference")?, required(&args.generated, "--generated")?);
    let load_all = |dir: &Path| -> CmdResult<Vec<(String, ImageTensor)>> {
        png_names(dir)?
            .into_iter()
            .map(|n| Ok((n.clone(), read_png(&dir.join(&n))?)))
            .collect()
    };
    let (refs, gens) = (load_all(ref_dir)?, load_all(gen_dir)?);
    let mut report = MetricReport::default();
    for (name, g) in &gens {
        if let Some((_, r)) = refs.iter().find(|(n, _)| n == name) {
            report.push_pair(PairScore { id: name.clone(), ssim: ssim(r, g)?, psnr: psnr(r, g)? });
        }
    }
    if refs.len() >= 2 && gens.len() >= 2 {
        let a: Vec<ImageTensor> = refs.into_iter().map(|x| x.1).collect();
        let b: Vec<ImageTensor> = gens.into_iter().map(|x| x.1).collect();
        report.moment_distance = Some(moment_distance(&a, &b, &MomentOptions::default())?);
    }
    write_report(&out, &report)
}

pub fn probe_fusion(args: ProbeFusionArgs) -> CmdResult {
    let (args, out) = resolve(args)?;
    let encoder = match &args.checkpoint {
        Some(path) => ConditionalModel::load(path)?.encoder,
        None => MetadataEncoder::new(EncoderConfig::default(), &mut derive(args.common.seed, 8))?,
    };
    let strategies: Vec<ProbeFusion> = args
        .strategies
        .iter()
        .map(|s| match s.as_str() {
            "add" | "additive" => Ok(ProbeFusion::Additive),
            "concat" => Ok(ProbeFusion::Concat),
            other => Err(invalid(format!("unknown strategy '{other}'"))),
        })
        .collect::<CmdResult<_>>()?;
    let mut report = MetricReport::default();
    for &missing in &args.missing {
        let cfg = RecoverabilityConfig { n_train: args.n_train, n_test: args.n_test, missing, ..Default::default() };
        for trial in 0..args.trials {
            for &fusion in &strategies {
                // equal streams per strategy make the trial paired
                let mut rng = derive(args.common.seed, 1000 + (missing * args.trials + trial) as u64);
                let r = recoverability_probe(|k, j| encoder.embed_attribute(k, j), fusion, &cfg, &mut rng)?;
                report.recoverability.push(r);
            }
        }
    }
    write_report(&out, &report)
}

pub fn probe_fidelity(args: ProbeFidelityArgs) -> CmdResult {
    let (args, out) = resolve(args)?;
    let model = ConditionalModel::load(required(&args.checkpoint, "--checkpoint")?)?;
    let kind: AttributeKind = args.attribute.parse()?;
    if args.points < 2 || args.seeds == 0 {
        return Err(invalid("need at least 2 sweep points and 1 seed"));
    }
    let sweep: Vec<f64> = (0..args.points)
        .map(|i| args.from + (args.to - args.from) * i as f64 / (args.points - 1) as f64)
        .collect();
    let base = SampleCondition { record: parse_meta(&args.meta)?, caption: args.prompt.clone() };
    let seeds: Vec<u64> = (0..args.seeds as u64).map(|i| args.common.seed.wrapping_add(i)).collect();
    let result = fidelity_probe(&model, kind, &sweep, &base, &seeds, &ddim(args.steps, args.guidance))?;
    let report = MetricReport { fidelity: vec![result], ..Default::default() };
    write_report(&out, &report)
}
