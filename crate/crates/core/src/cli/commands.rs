use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::config::{DataSource, RunConfig, SampleMode, SampleRun};
use super::grid::{grid_extension, write_grid};
use super::manifest::{sha256_file, RunManifest, RunStatus};
use crate::data::{
    build_pairing, concat, load_cifar_binary, load_idx, pack_pairs, synth_paired, unpack, PackedDataset, PackedLayout,
};
use crate::denoiser::DenoiserModel;
use crate::diffusion::{
    model_from_container, sample_guided, sample_unconditional, schedule_from_container, ChannelMask, Guidance,
    StepRecord, TrainingState,
};
use crate::error::{Error, Result};
use crate::eval::{
    conditional_precision_recall, fid, inception_score, matching_pseudo_precision, train_classifier,
    FeatureClassifier, GaussianFit, MetricReport,
};
use crate::numerics::checkpoint::write_atomic;
use crate::numerics::{Container, Precision, Rng, Tensor};

const DATA_STREAM: u64 = 0x10;
const PAIRING_STREAM: u64 = 0x11;
const CLASSIFIER_STREAM: u64 = 0x20;
const CONDITION_STREAM: u64 = 0x30;

/// File names inside a run directory.
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub const DATA: &'static str = "data.jdck";
    pub const CLASSIFIERS: &'static str = "classifiers.jdck";
    pub const LOSS: &'static str = "loss.csv";
    pub const METRICS_CSV: &'static str = "metrics.csv";
    pub const METRICS_TXT: &'static str = "metrics.txt";

    pub fn new(cfg: &RunConfig) -> Self {
        RunPaths { root: cfg.output_path() }
    }

    pub fn file(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn checkpoint_rel(epoch: usize) -> String {
        format!("checkpoints/epoch-{epoch:04}.jdck")
    }

    pub fn dump_rel(run: &SampleRun) -> String {
        format!("samples/{}.jdck", run.label())
    }

    fn ensure(&self, sub: &str) -> Result<()> {
        let d = self.root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))
    }
}

fn finish_stage(paths: &RunPaths, manifest: &mut RunManifest, stage: &str, started: Instant, files: &[String]) -> Result<()> {
    for f in files {
        manifest.record_file(&paths.root, f)?;
    }
    manifest.timings.insert(stage.to_string(), started.elapsed().as_secs_f64());
    manifest.status = RunStatus::Ok;
    manifest.error = None;
    manifest.write(&paths.root)
}

fn build_dataset(cfg: &RunConfig) -> Result<PackedDataset> {
    let d = &cfg.data;
    match d.source {
        DataSource::Synthetic => synth_paired(d.classes, d.per_class, d.resolution, &mut Rng::new(cfg.seed, DATA_STREAM)),
        DataSource::Files => {
            let cifar = concat(d.cifar.iter().map(|p| load_cifar_binary(p)).collect::<Result<Vec<_>>>()?)?;
            let (imgs, labels) = (d.idx_images.as_ref().unwrap(), d.idx_labels.as_ref().unwrap());
            let gray = load_idx(imgs, labels)?;
            let plan = build_pairing(&cifar.labels, &gray.labels, d.quota, cfg.seed ^ PAIRING_STREAM)?;
            pack_pairs(&cifar, &gray, ("color", "gray"), &plan, d.resolution, d.resample)
        }
    }
}

pub struct PackOutcome {
    pub digest: String,
    pub samples: usize,
}

/// Build (or load and pair) the corpus and cache it as a packed dataset.
pub fn cmd_pack(cfg: &RunConfig) -> Result<PackOutcome> {
    let started = Instant::now();
    let paths = RunPaths::new(cfg);
    paths.ensure("")?;
    let ds = build_dataset(cfg)?;
    let mut c = Container::new();
    ds.write_to(&mut c)?;
    c.write(&paths.file(RunPaths::DATA))?;
    let mut manifest = RunManifest::open(&paths.root, cfg);
    let digest = sha256_file(&paths.file(RunPaths::DATA))?;
    manifest.dataset_digest = Some(digest.clone());
    finish_stage(&paths, &mut manifest, "pack", started, &[RunPaths::DATA.into()])?;
    log::info!("packed {} samples, layout {:?}", ds.len(), ds.layout.modalities);
    Ok(PackOutcome { digest, samples: ds.len() })
}

pub fn load_dataset(paths: &RunPaths) -> Result<PackedDataset> {
    PackedDataset::read_from(&Container::read(&paths.file(RunPaths::DATA))?)
}

pub fn load_classifiers(paths: &RunPaths, layout: &PackedLayout) -> Result<Vec<FeatureClassifier>> {
    let c = Container::read(&paths.file(RunPaths::CLASSIFIERS))?;
    layout
        .modalities
        .iter()
        .map(|m| {
            let clf = FeatureClassifier::read_from(&c, &format!("{}.", m.name))?;
            if clf.in_channels != m.width() {
                return Err(Error::Data(format!(
                    "classifier for {} expects {} channels, layout has {}",
                    m.name,
                    clf.in_channels,
                    m.width()
                )));
            }
            Ok(clf)
        })
        .collect()
}

fn labels_usize(ds: &PackedDataset) -> Vec<usize> {
    ds.labels.iter().map(|&l| l as usize).collect()
}

fn train_classifiers(cfg: &RunConfig, ds: &PackedDataset, paths: &RunPaths, manifest: &mut RunManifest) -> Result<()> {
    let labels = labels_usize(ds);
    let mut c = Container::new();
    for (k, m) in ds.layout.modalities.iter().enumerate() {
        let x = ds.modality(&m.name)?;
        let mut rng = Rng::new(cfg.seed, CLASSIFIER_STREAM + k as u64);
        let (clf, report) = train_classifier(&x, &labels, &cfg.eval.classifier, &mut rng)?;
        log::info!("classifier {}: {report:?}", m.name);
        manifest.metrics.insert(format!("classifier_train_accuracy.{}", m.name), report.train_accuracy);
        if report.heldout_accuracy.is_finite() {
            manifest.metrics.insert(format!("classifier_heldout_accuracy.{}", m.name), report.heldout_accuracy);
        }
        clf.write_to(&mut c, &format!("{}.", m.name))?;
    }
    c.write(&paths.file(RunPaths::CLASSIFIERS))
}

fn loss_csv(rows: &[StepRecord]) -> String {
    let mut s = String::from("step,epoch,loss,lr\n");
    for r in rows {
        s.push_str(&format!("{},{},{:?},{:?}\n", r.step, r.epoch, r.loss, r.lr));
    }
    s
}

fn read_loss_csv(path: &Path, before_step: u64) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let parse = || -> Option<StepRecord> {
            Some(StepRecord {
                step: f.first()?.parse().ok()?,
                epoch: f.get(1)?.parse().ok()?,
                loss: f.get(2)?.parse().ok()?,
                lr: f.get(3)?.parse().ok()?,
            })
        };
        let r = parse().ok_or_else(|| Error::format(path, format!("line {}: malformed row", i + 1)))?;
        if r.step < before_step {
            rows.push(r);
        }
    }
    Ok(rows)
}

pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub final_loss: f64,
    pub steps: u64,
}

fn is_numeric_failure(e: &Error) -> bool {
    matches!(
        e,
        Error::NonFinite { .. } | Error::NonFiniteGradient { .. } | Error::NonFiniteLoss { .. } | Error::NonFiniteState { .. }
    )
}

/// Train the per-modality classifiers and the denoiser. With `resume`, training
/// continues from that checkpoint and the loss log is truncated to match it.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    let started = Instant::now();
    let paths = RunPaths::new(cfg);
    paths.ensure("checkpoints")?;
    let ds = load_dataset(&paths)?;
    let mut manifest = RunManifest::open(&paths.root, cfg);
    manifest.dataset_digest = Some(sha256_file(&paths.file(RunPaths::DATA))?);
    let result = train_inner(cfg, &ds, &paths, &mut manifest, resume);
    match result {
        Ok((outcome, files)) => {
            if outcome.final_loss.is_finite() {
                manifest.metrics.insert("final_loss".into(), outcome.final_loss);
            }
            finish_stage(&paths, &mut manifest, "train", started, &files)?;
            Ok(outcome)
        }
        Err(e) => {
            if is_numeric_failure(&e) {
                manifest.status = RunStatus::Failed;
                manifest.error = Some(e.to_string());
                manifest.timings.insert("train".into(), started.elapsed().as_secs_f64());
                manifest.write(&paths.root)?;
            }
            Err(e)
        }
    }
}

fn train_inner(
    cfg: &RunConfig,
    ds: &PackedDataset,
    paths: &RunPaths,
    manifest: &mut RunManifest,
    resume: Option<&Path>,
) -> Result<(TrainOutcome, Vec<String>)> {
    train_classifiers(cfg, ds, paths, manifest)?;
    let mut files = vec![RunPaths::CLASSIFIERS.to_string()];
    let schedule = cfg.schedule.build()?;
    let (mut state, mut rows) = match resume {
        Some(p) => {
            let st = TrainingState::from_container(&Container::read(p)?)?;
            if st.model.config() != &cfg.denoiser(ds.layout.channels)? {
                return Err(Error::Config(format!("checkpoint {} was trained with a different model config", p.display())));
            }
            let rows = read_loss_csv(&paths.file(RunPaths::LOSS), st.global_step)?;
            (st, rows)
        }
        None => {
            manifest.checkpoints.clear();
            let st = TrainingState::new(cfg.denoiser(ds.layout.channels)?, cfg.optimizer, schedule, cfg.seed)?;
            (st, Vec::new())
        }
    };
    let mut final_loss = rows.last().map_or(f64::NAN, |r| r.loss);
    let mut last_ckpt = None;
    while (state.epoch as usize) < cfg.train.epochs {
        let stats = state.train_epoch_with(&ds.data, cfg.train.batch_size, |r| rows.push(r.clone()))?;
        final_loss = stats.steps.last().map_or(final_loss, |r| r.loss);
        let epoch = state.epoch as usize;
        log::info!("epoch {epoch}: mean loss {:.5}", stats.mean);
        write_atomic(&paths.file(RunPaths::LOSS), loss_csv(&rows).as_bytes())?;
        if epoch % cfg.train.checkpoint_every == 0 || epoch == cfg.train.epochs {
            let rel = RunPaths::checkpoint_rel(epoch);
            state.to_container(cfg.train.precision)?.write(&paths.file(&rel))?;
            if !manifest.checkpoints.contains(&rel) {
                manifest.checkpoints.push(rel.clone());
            }
            files.push(rel.clone());
            last_ckpt = Some(rel);
        }
    }
    let rel = last_ckpt.unwrap_or_else(|| RunPaths::checkpoint_rel(cfg.train.epochs));
    if !paths.file(&rel).exists() {
        state.to_container(cfg.train.precision)?.write(&paths.file(&rel))?;
        files.push(rel.clone());
    }
    write_atomic(&paths.file(RunPaths::LOSS), loss_csv(&rows).as_bytes())?;
    files.push(RunPaths::LOSS.to_string());
    Ok((TrainOutcome { final_checkpoint: paths.file(&rel), final_loss, steps: state.global_step }, files))
}

fn guidance(mode: SampleMode) -> Option<Guidance> {
    match mode {
        SampleMode::Joint => None,
        SampleMode::Random => Some(Guidance::Random),
        SampleMode::Predicted => Some(Guidance::Predicted),
        SampleMode::Constant => Some(Guidance::Constant),
    }
}

/// Per-run stream for the chain covering samples starting at `chunk`.
fn chain_rng(seed: u64, run: usize, chunk: usize) -> Rng {
    Rng::new(seed, ((run as u64 + 1) << 32) | chunk as u64)
}

fn generate(
    cfg: &RunConfig,
    run_index: usize,
    run: &SampleRun,
    model: &DenoiserModel,
    schedule: &crate::diffusion::NoiseSchedule,
    ds: &PackedDataset,
) -> Result<Container> {
    let layout = &ds.layout;
    let n = cfg.sample.count;
    let (mask, sources) = match &run.guide {
        None => (ChannelMask::unconditional(layout.channels), Vec::new()),
        Some(g) => {
            let guide = layout.modality(g)?.indices();
            let gen: Vec<usize> = (0..layout.channels).filter(|c| !guide.contains(c)).collect();
            let sources: Vec<usize> = match cfg.sample.condition_index {
                Some(i) if i < ds.len() => vec![i; n],
                Some(i) => return Err(Error::Config(format!("condition_index {i} outside dataset of {}", ds.len()))),
                None => {
                    let mut rng = Rng::new(cfg.seed, CONDITION_STREAM + run_index as u64);
                    (0..n).map(|_| rng.below(ds.len() as u64) as usize).collect()
                }
            };
            (ChannelMask::new(gen, guide, layout.channels)?, sources)
        }
    };
    let (h, w) = (layout.height, layout.width);
    let mut full = Vec::with_capacity(n * layout.channels * h * w);
    for (ci, start) in (0..n).step_by(cfg.sample.batch).enumerate() {
        let m = cfg.sample.batch.min(n - start);
        let mut rng = chain_rng(cfg.seed, run_index, ci);
        let out = match guidance(run.mode) {
            None => sample_unconditional(model, schedule, &[m, layout.channels, h, w], &mut rng)?,
            Some(scheme) => {
                let clean = ds.subset(&sources[start..start + m])?;
                let cond = clean.select_channels(mask.guiding())?;
                let gen = sample_guided(model, schedule, &mask, &cond, scheme, &mut rng, None)?;
                let mut z = clean;
                z.assign_channels(mask.generation(), &gen)?;
                z
            }
        };
        full.extend_from_slice(out.data());
        log::info!("{}: {}/{n} samples", run.label(), start + m);
    }
    let data = Tensor::new(vec![n, layout.channels, h, w], full)?;
    let intents: Vec<u8> = sources.iter().map(|&i| ds.labels[i]).collect();
    let mut c = Container::new();
    c.push_str("sample.mode", run.mode.name())?;
    c.push_str("sample.guide", run.guide.as_deref().unwrap_or(""))?;
    c.push_str("sample.layout", &serde_json::to_string(layout).expect("layout serialises"))?;
    c.push_u64s("sample.generation", mask.generation().iter().map(|&v| v as u64).collect())?;
    c.push_u64s("sample.guiding", mask.guiding().iter().map(|&v| v as u64).collect())?;
    c.push_u64s("sample.source", sources.iter().map(|&v| v as u64).collect())?;
    c.push_bytes("sample.intent", vec![intents.len()], intents)?;
    c.push_tensor("sample.data", &data, Precision::F64)?;
    Ok(c)
}

/// Per-modality 8-bit images `[N, c, H, W]` unpacked from packed samples.
fn modality_bytes(data: &Tensor, layout: &PackedLayout, name: &str) -> Result<Vec<u8>> {
    let per = layout.channels * layout.plane();
    let mut out = Vec::new();
    for s in data.data().chunks(per) {
        out.extend(unpack(s, layout, name)?);
    }
    Ok(out)
}

fn write_grids(paths: &RunPaths, label: &str, data: &Tensor, layout: &PackedLayout) -> Result<Vec<String>> {
    let n = data.shape()[0];
    let mut files = Vec::new();
    for m in &layout.modalities {
        let rel = format!("samples/{label}_{}.{}", m.name, grid_extension(m.width()));
        let bytes = modality_bytes(data, layout, &m.name)?;
        write_grid(&paths.file(&rel), &bytes, n, m.width(), layout.height, layout.width)?;
        files.push(rel);
    }
    Ok(files)
}

pub fn default_checkpoint(cfg: &RunConfig) -> PathBuf {
    RunPaths::new(cfg).file(&RunPaths::checkpoint_rel(cfg.train.epochs))
}

/// Generate every configured run (or the given ones) and write dumps and grids.
pub fn cmd_sample(cfg: &RunConfig, checkpoint: Option<&Path>, runs: Option<&[SampleRun]>) -> Result<Vec<PathBuf>> {
    let started = Instant::now();
    let paths = RunPaths::new(cfg);
    paths.ensure("samples")?;
    let ckpt = checkpoint.map_or_else(|| default_checkpoint(cfg), Path::to_path_buf);
    let c = Container::read(&ckpt)?;
    let model = model_from_container(&c)?;
    let schedule = schedule_from_container(&c)?;
    let ds = load_dataset(&paths)?;
    if model.config().in_channels != ds.layout.channels {
        return Err(Error::Config(format!(
            "checkpoint has {} channels, dataset layout has {}",
            model.config().in_channels,
            ds.layout.channels
        )));
    }
    let runs = runs.unwrap_or(&cfg.sample.runs);
    let mut manifest = RunManifest::open(&paths.root, cfg);
    let mut files = Vec::new();
    let mut dumps = Vec::new();
    for run in runs {
        let index = cfg.sample.runs.iter().position(|r| r == run).unwrap_or(cfg.sample.runs.len());
        let dump = generate(cfg, index, run, &model, &schedule, &ds)?;
        let rel = RunPaths::dump_rel(run);
        dump.write(&paths.file(&rel))?;
        files.extend(write_grids(&paths, &run.label(), &dump.tensor("sample.data")?, &ds.layout)?);
        files.push(rel.clone());
        dumps.push(paths.file(&rel));
    }
    finish_stage(&paths, &mut manifest, "sample", started, &files)?;
    Ok(dumps)
}

struct Dump {
    run: SampleRun,
    data: Tensor,
    generation: Vec<usize>,
    intent: Vec<usize>,
}

fn read_dump(path: &Path, run: &SampleRun, layout: &PackedLayout) -> Result<Dump> {
    let c = Container::read(path)?;
    let dumped: PackedLayout = serde_json::from_str(&c.string("sample.layout")?)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if &dumped != layout {
        return Err(Error::format(path, "sample layout differs from the dataset layout"));
    }
    Ok(Dump {
        run: run.clone(),
        data: c.tensor("sample.data")?,
        generation: c.u64s("sample.generation")?.iter().map(|&v| v as usize).collect(),
        intent: c.bytes("sample.intent")?.1.iter().map(|&v| v as usize).collect(),
    })
}

/// Score every configured sample dump against the dataset with the trained classifiers.
pub fn cmd_eval(cfg: &RunConfig) -> Result<MetricReport> {
    let started = Instant::now();
    let paths = RunPaths::new(cfg);
    let ds = load_dataset(&paths)?;
    let classifiers = load_classifiers(&paths, &ds.layout)?;
    let classes = ds.classes();
    let mut report = MetricReport { rows: Vec::new(), config_digest: cfg.digest() };
    let mut real_fits = Vec::new();
    for m in &ds.layout.modalities {
        let clf = &classifiers[real_fits.len()];
        real_fits.push(GaussianFit::from_features(&clf.features(&ds.modality(&m.name)?)?)?);
    }
    for run in &cfg.sample.runs {
        let dump = read_dump(&paths.file(&RunPaths::dump_rel(run)), run, &ds.layout)?;
        let label = dump.run.label();
        let n = dump.data.shape()[0];
        report.push(&format!("{label}/count"), "all", None, n as f64);
        let mut predictions = Vec::new();
        for (k, m) in ds.layout.modalities.iter().enumerate() {
            if !m.channels.clone().all(|c| dump.generation.contains(&c)) {
                predictions.push(None);
                continue;
            }
            let x = dump.data.select_channels(&m.indices())?;
            let clf = &classifiers[k];
            let fit = GaussianFit::from_features(&clf.features(&x)?)?;
            report.push(&format!("{label}/fid"), &m.name, None, fid(&fit, &real_fits[k])?);
            let probs = clf.probabilities(&x)?;
            let (is_mean, is_std) = inception_score(&probs, cfg.eval.is_splits.min(n))?;
            report.push(&format!("{label}/is_mean"), &m.name, None, is_mean);
            report.push(&format!("{label}/is_std"), &m.name, None, is_std);
            let pred = clf.predict(&x)?;
            if !dump.intent.is_empty() {
                let pr = conditional_precision_recall(&dump.intent, &pred, classes)?;
                report.push_precision_recall(&format!("{label}/conditional"), &m.name, &pr);
            }
            predictions.push(Some(pred));
        }
        if dump.intent.is_empty() {
            let generated: Vec<(usize, &Vec<usize>)> =
                predictions.iter().enumerate().filter_map(|(k, p)| p.as_ref().map(|p| (k, p))).collect();
            for pair in generated.windows(2) {
                let ((ka, pa), (kb, pb)) = (pair[0], pair[1]);
                let (na, nb) = (&ds.layout.modalities[ka].name, &ds.layout.modalities[kb].name);
                let ms = matching_pseudo_precision(pa, pb, classes)?;
                report.push_precision_recall(&format!("{label}/matching"), &format!("{na}~{nb}"), &ms.a_vs_b);
                report.push_precision_recall(&format!("{label}/matching"), &format!("{nb}~{na}"), &ms.b_vs_a);
            }
        }
    }
    write_atomic(&paths.file(RunPaths::METRICS_CSV), report.to_csv().as_bytes())?;
    write_atomic(&paths.file(RunPaths::METRICS_TXT), report.to_text().as_bytes())?;
    let mut manifest = RunManifest::open(&paths.root, cfg);
    for r in report.rows.iter().filter(|r| r.class.is_none() && r.value.is_finite()) {
        manifest.metrics.insert(format!("{}.{}", r.metric, r.modality), r.value);
    }
    finish_stage(&paths, &mut manifest, "eval", started, &[RunPaths::METRICS_CSV.into(), RunPaths::METRICS_TXT.into()])?;
    Ok(report)
}

/// Human-readable summary of a container file or a manifest.
pub fn cmd_inspect(path: &Path, verify: bool) -> Result<String> {
    let is_manifest = path.extension().is_some_and(|e| e == "json");
    if is_manifest {
        let m = RunManifest::read(path)?;
        let mut s = format!(
            "manifest: status {:?}, version {}, config {}\n",
            m.status, m.code_version, m.config_digest
        );
        if let Some(d) = &m.dataset_digest {
            s.push_str(&format!("dataset {d}\n"));
        }
        for (k, v) in &m.timings {
            s.push_str(&format!("time {k}: {v:.2}s\n"));
        }
        for (k, v) in &m.metrics {
            s.push_str(&format!("metric {k}: {v:.6}\n"));
        }
        for (k, v) in &m.files {
            s.push_str(&format!("file {k}: {v}\n"));
        }
        if verify {
            let dir = path.parent().unwrap_or(Path::new("."));
            let bad = m.verify(dir);
            if !bad.is_empty() {
                return Err(Error::Data(format!("manifest verification failed for: {}", bad.join(", "))));
            }
            s.push_str("verified: all digests match\n");
        }
        return Ok(s);
    }
    let c = Container::read(path)?;
    let mut s = format!("container {} with {} records\n", path.display(), c.records().len());
    for r in c.records() {
        s.push_str(&format!("  {} {} {:?}\n", r.name, r.payload.dtype_name(), r.shape));
    }
    Ok(s)
}
