//! Acceptance harness: runs every criterion in order and prints one PASS/FAIL
//! line for each. Exits non-zero if any criterion fails.
//!
//! Criteria 4 to 6 share two full desk-scale pipeline runs (pack, train,
//! sample, eval) with the configuration in `configs/desk.toml`.

mod support;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use chandiff::cli::{cmd_eval, cmd_pack, cmd_sample, cmd_train, RunConfig, RunManifest, MANIFEST_FILE};
use chandiff::diffusion::{NoiseSchedule, TrainingState};
use chandiff::eval::{fid, inception_score, GaussianFit, MetricReport};
use chandiff::numerics::{Container, Graph, Rng, Tensor};
use nalgebra::{DMatrix, DVector};
use support::{grad, moments};

struct Outcome {
    pass: bool,
    lines: Vec<String>,
}

impl Outcome {
    fn new() -> Self {
        Outcome { pass: true, lines: Vec::new() }
    }

    fn check(&mut self, ok: bool, line: String) {
        self.pass &= ok;
        self.lines.push(format!("{} {line}", if ok { "ok  " } else { "FAIL" }));
    }
}

fn within_budget(o: &mut Outcome, started: Instant, budget: Duration) {
    let took = started.elapsed();
    o.check(took <= budget, format!("runtime {:.1}s (budget {}s)", took.as_secs_f64(), budget.as_secs()));
}

fn exact_identities() -> Outcome {
    let started = Instant::now();
    let mut o = Outcome::new();

    let mut rng = Rng::new(1, 0);
    let mut worst: f64 = 0.0;
    for beta1 in [1e-4, 1e-3, 0.02, 0.2, 0.5] {
        let s = NoiseSchedule::linear(10, beta1, 0.6).unwrap();
        let x0 = rng.normal_tensor(vec![4, 3, 5, 5]);
        let eps = rng.normal_tensor(vec![4, 3, 5, 5]);
        let x1 = s.q_sample(&x0, 1, &eps).unwrap();
        worst = worst.max(s.reverse_step(&x1, 1, &eps, None).unwrap().max_abs_diff(&x0));
    }
    o.check(worst < 1e-12, format!("one-step reverse inversion: max |x0 - x0'| = {worst:e} (< 1e-12)"));

    let mut worst: f64 = 0.0;
    for (t, b0, b1) in [(1000, 1e-4, 0.02), (100, 1e-3, 0.2), (7, 0.05, 0.5)] {
        let s = NoiseSchedule::linear(t, b0, b1).unwrap();
        for k in 1..=t {
            let direct: f64 = (1..=k).map(|j| 1.0 - (b0 + (b1 - b0) * (j - 1) as f64 / (t - 1) as f64)).product();
            worst = worst.max((s.alpha_bar(k) - direct).abs() / direct);
        }
    }
    o.check(worst < 1e-10, format!("cumulative products vs direct product: max rel {worst:e} (< 1e-10)"));

    let fit = |m: &[f64], c: &[f64]| {
        let d = m.len();
        GaussianFit::new(DVector::from_row_slice(m), DMatrix::from_row_slice(d, d, c)).unwrap()
    };
    let a = fit(&[0.3, -1.0, 2.0], &[2.0, 0.4, 0.1, 0.4, 1.0, -0.2, 0.1, -0.2, 0.5]);
    let identical = fid(&a, &a).unwrap();
    let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    let shifted = fid(&fit(&[0.0, 0.0, 0.0], &eye), &fit(&[1.0, -2.0, 2.0], &eye)).unwrap();
    let scalar = fid(&fit(&[0.0], &[1.0]), &fit(&[0.0], &[4.0])).unwrap();
    let fid_ok = identical.abs() < 1e-8 && (shifted - 9.0).abs() < 1e-8 && (scalar - 1.0).abs() < 1e-8;
    o.check(fid_ok, format!("FID closed forms: identical {identical:e}, |d|^2=9 -> {shifted}, scalar -> {scalar}"));

    let k = 5;
    let uniform = Tensor::full(vec![50, k], 1.0 / k as f64);
    let (lo, _) = inception_score(&uniform, 1).unwrap();
    let onehot = Tensor::new(vec![50, k], (0..50 * k).map(|i| f64::from(u8::from(i % k == (i / k) % k))).collect()).unwrap();
    let (hi, _) = inception_score(&onehot, 1).unwrap();
    o.check(
        (lo - 1.0).abs() < 1e-12 && (hi - k as f64).abs() < 1e-12,
        format!("IS bounds attained: uniform rows {lo}, one-hot over {k} classes {hi}"),
    );
    within_budget(&mut o, started, Duration::from_secs(60));
    o
}

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let mut o = Outcome::new();
    let prims = grad::primitives();
    let (worst_name, worst) = prims.iter().fold(("", 0.0f64), |acc, (n, e)| if *e > acc.1 { (n, *e) } else { acc });
    for (name, err) in &prims {
        if *err >= grad::PRIMITIVE_TOL {
            o.check(false, format!("{name}: {err:e}"));
        }
    }
    o.check(
        worst < grad::PRIMITIVE_TOL,
        format!("{} primitives, worst {worst_name} {worst:e} (< {:e})", prims.len(), grad::PRIMITIVE_TOL),
    );
    let e2e = grad::tiny_denoiser();
    o.check(e2e < grad::END_TO_END_TOL, format!("tiny denoiser end to end {e2e:e} (< {:e})", grad::END_TO_END_TOL));
    within_budget(&mut o, started, Duration::from_secs(300));
    o
}

fn distribution_suite() -> Outcome {
    let started = Instant::now();
    let mut o = Outcome::new();
    for d in moments::forward_process().into_iter().chain(moments::random_guidance()) {
        o.check(
            d.worst() < moments::TOL,
            format!("{} t={}: mean dev {:+.4}, variance dev {:+.4} ({} chains)", d.label, d.t, d.mean, d.var, moments::CHAINS),
        );
    }
    within_budget(&mut o, started, Duration::from_secs(300));
    o
}

struct PipelineRun {
    dir: PathBuf,
    report: MetricReport,
    train_time: Duration,
    total_time: Duration,
}

fn desk_config(dir: &Path) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    RunConfig::load(&path, &[format!("output_dir=\"{}\"", dir.display())]).expect("desk config")
}

fn pipeline(dir: &Path) -> chandiff::Result<PipelineRun> {
    let started = Instant::now();
    let cfg = desk_config(dir);
    cmd_pack(&cfg)?;
    let t = Instant::now();
    cmd_train(&cfg, None)?;
    let train_time = t.elapsed();
    cmd_sample(&cfg, None, None)?;
    let report = cmd_eval(&cfg)?;
    Ok(PipelineRun { dir: dir.to_path_buf(), report, train_time, total_time: started.elapsed() })
}

fn metric(r: &MetricReport, name: &str, modality: &str) -> f64 {
    r.get(name, modality).unwrap_or(f64::NAN)
}

fn association(run: &PipelineRun) -> Outcome {
    let mut o = Outcome::new();
    let r = &run.report;
    o.check(
        run.train_time <= Duration::from_secs(30 * 60),
        format!("training took {:.0}s (budget 1800s); whole pipeline {:.0}s", run.train_time.as_secs_f64(), run.total_time.as_secs_f64()),
    );
    let (ab, ba) = (metric(r, "joint/matching_precision", "bar~disc"), metric(r, "joint/matching_precision", "disc~bar"));
    o.check(ab >= 0.5 && ba >= 0.5, format!("(a) joint matching pseudo-precision {ab:.3} / {ba:.3} (>= 0.5, chance 0.25)"));
    let random = metric(r, "random-bar/conditional_accuracy", "disc");
    o.check(random >= 0.5, format!("(b) random-noise guidance bar -> disc class-match accuracy {random:.3} (>= 0.5, chance 0.25)"));
    let constant = metric(r, "constant-bar/conditional_accuracy", "disc");
    let (n_random, n_constant) = (metric(r, "random-bar/count", "all"), metric(r, "constant-bar/count", "all"));
    o.check(
        constant <= random && n_random >= 200.0 && n_constant >= 200.0,
        format!("(c) constant guidance {constant:.3} <= random guidance {random:.3} over {n_constant} / {n_random} generations"),
    );
    if let Some(p) = r.get("predicted-bar/conditional_accuracy", "disc") {
        o.lines.push(format!("info predicted-noise guidance bar -> disc accuracy {p:.3}"));
    }
    o
}

fn bidirectional(run: &PipelineRun) -> Outcome {
    let mut o = Outcome::new();
    let r = &run.report;
    let ab = metric(r, "random-bar/conditional_accuracy", "disc");
    let ba = metric(r, "random-disc/conditional_accuracy", "bar");
    o.check(ab >= 0.4, format!("bar -> disc accuracy {ab:.3} (>= 0.4)"));
    o.check(ba >= 0.4, format!("disc -> bar accuracy {ba:.3} (>= 0.4)"));
    o
}

fn pixel_range(run: &PipelineRun) -> Outcome {
    let mut o = Outcome::new();
    let c = Container::read(&run.dir.join("samples/joint.jdck")).unwrap();
    let x = c.tensor("sample.data").unwrap();
    let inside = x.data().iter().filter(|v| (-1.0..=1.0).contains(*v)).count() as f64 / x.numel() as f64;
    o.check(inside >= 0.99, format!("joint samples: {:.2}% of pixels in [-1, 1] (>= 99%)", 100.0 * inside));
    o
}

fn reproducibility(a: &PipelineRun, b: &PipelineRun) -> Outcome {
    let mut o = Outcome::new();
    let ma = RunManifest::read(&a.dir.join(MANIFEST_FILE)).unwrap();
    let mb = RunManifest::read(&b.dir.join(MANIFEST_FILE)).unwrap();
    let mut identical = 0;
    for (rel, digest) in &ma.files {
        let same = fs_bytes(&a.dir.join(rel)) == fs_bytes(&b.dir.join(rel)) && mb.files.get(rel) == Some(digest);
        if same {
            identical += 1;
        } else {
            o.check(false, format!("{rel} differs"));
        }
    }
    let checkpoints = ma.checkpoints.len();
    let dumps = ma.files.keys().filter(|k| k.starts_with("samples/") && k.ends_with(".jdck")).count();
    o.check(
        identical == ma.files.len() && ma.files.len() == mb.files.len(),
        format!("{identical}/{} recorded files bit-identical ({checkpoints} checkpoints, {dumps} sample dumps)", ma.files.len()),
    );
    o.check(a.report.rows == b.report.rows, format!("metric reports identical ({} rows)", a.report.rows.len()));
    o
}

fn fs_bytes(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_default()
}

fn initial_loss() -> Outcome {
    let mut o = Outcome::new();
    let run = tempfile::tempdir().unwrap();
    let cfg = desk_config(run.path());
    let ds = chandiff::data::synth_paired(cfg.data.classes, cfg.data.per_class, cfg.data.resolution, &mut Rng::new(cfg.seed, 0))
        .unwrap();
    let st = TrainingState::new(cfg.denoiser(ds.layout.channels).unwrap(), cfg.optimizer, cfg.schedule.build().unwrap(), cfg.seed)
        .unwrap();
    let (mut noise, mut steps, mut pick) = (st.noise_rng.clone(), st.timestep_rng.clone(), Rng::new(cfg.seed, 9));
    let b = cfg.train.batch_size;
    let mut losses = Vec::new();
    for _ in 0..100 {
        let idx: Vec<usize> = (0..b).map(|_| pick.below(ds.len() as u64) as usize).collect();
        let x0 = ds.subset(&idx).unwrap();
        let ts: Vec<usize> = (0..b).map(|_| 1 + steps.below(st.schedule.timesteps() as u64) as usize).collect();
        let eps = noise.normal_tensor(x0.shape().to_vec());
        let xt = Tensor::stack(
            &(0..b).map(|i| st.schedule.q_sample(&x0.index(i), ts[i], &eps.index(i)).unwrap()).collect::<Vec<_>>(),
        )
        .unwrap();
        let mut g = Graph::new();
        let (z, target) = (g.constant(xt).unwrap(), g.constant(eps).unwrap());
        let pred = st.model.forward(&mut g, z, &ts, false).unwrap();
        let l = g.mse(pred, target).unwrap();
        losses.push(g.value(l).item());
    }
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    let (lo, hi) = losses.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &l| (a.min(l), b.max(l)));
    o.check(
        lo >= 0.9 && hi <= 1.1,
        format!("untrained loss over 100 batches of {b}: mean {mean:.4}, range [{lo:.4}, {hi:.4}] (within [0.9, 1.1])"),
    );
    o
}

fn print(id: &str, title: &str, o: &Outcome) {
    println!("criterion {id}: {} {title}", if o.pass { "PASS" } else { "FAIL" });
    for l in &o.lines {
        println!("    {l}");
    }
}

fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).is_test(true).try_init();
    let mut all = true;
    let mut record = |id: &str, title: &str, o: Outcome| {
        print(id, title, &o);
        all &= o.pass;
    };
    record("1", "exact identities", exact_identities());
    record("2", "gradient suite", gradient_suite());
    record("3", "distributional suite", distribution_suite());

    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let runs = pipeline(da.path()).and_then(|a| pipeline(db.path()).map(|b| (a, b)));
    match runs {
        Ok((a, b)) => {
            record("4", "desk-scale cross-modal association", association(&a));
            record("5", "bidirectional guidance", bidirectional(&a));
            record("6", "reproducibility across two full runs", reproducibility(&a, &b));
            record("extra", "generated pixel range", pixel_range(&a));
        }
        Err(e) => {
            for id in ["4", "5", "6"] {
                let mut o = Outcome::new();
                o.check(false, format!("pipeline failed: {e}"));
                record(id, "desk-scale pipeline", o);
            }
        }
    }
    record("7", "initial-loss sanity", initial_loss());
    if !all {
        std::process::exit(1);
    }
}
