//! End-to-end acceptance run: trains the default model once and checks every
//! criterion, printing one PASS/FAIL line each.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use clap::Parser;
use ndarray::{Array1, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use twinstep::cli::{self, read_motion, read_track, Cli, Edit, EditScript};
use twinstep::codec::{embed_label, knn_decode};
use twinstep::data::io::write_dataset;
use twinstep::data::{generate_split, oracle_label, CorpusConfig, DatasetRecord, OracleConfig};
use twinstep::diffusion::{make_schedule, q_sample, training_step, SamplerConfig, ScheduleKind, TaskMode, TrainingBatch};
use twinstep::eval::{
    evaluate_model, fid, frame_accuracy, r_precision, train_joint_embedder, EmbedderConfig, EvalConfig, MetricReport,
};
use twinstep::nn::{Denoiser, DenoiserConfig};
use twinstep::pipeline::{build_model, read_log, train_to_dir, Checkpoint, ModelConfig, Request, TrainConfig, Trainer, UniModel};

const TRAIN_STEPS: u64 = 6000;

struct Outcome {
    lines: Vec<(usize, bool, String)>,
}

impl Outcome {
    fn record(&mut self, n: usize, pass: bool, detail: String) {
        report_line(&format!("criterion {n:>2}: {} | {detail}", if pass { "PASS" } else { "FAIL" }));
        self.lines.push((n, pass, detail));
    }

    fn record_result(&mut self, n: usize, r: Result<(bool, String), String>) {
        match r {
            Ok((pass, detail)) => self.record(n, pass, detail),
            Err(e) => self.record(n, false, format!("error: {e}")),
        }
    }
}

/// Writes straight to stderr so the line shows even when test output is captured.
fn report_line(line: &str) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn criterion_1() -> (bool, String) {
    let start = Instant::now();
    let s = make_schedule(ScheduleKind::Cosine, 1000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z0 = Array1::from(vec![1.2f64, -0.7, 0.3]);
    let draws = 100_000;
    let mut worst = 0.0f64;
    let mut pass = true;
    for t in [1, 250, 500, 1000] {
        let mut sum = Array1::<f64>::zeros(3);
        let mut sq = Array1::<f64>::zeros(3);
        for _ in 0..draws {
            let eps = Array1::from_shape_simple_fn(3, || StandardNormal.sample(&mut rng));
            let z = q_sample(&z0, t, &eps, &s).unwrap();
            sum += &z;
            sq += &z.mapv(|v| v * v);
        }
        let ab = s.alpha_bar_at(t).unwrap();
        for k in 0..3 {
            let mean = sum[k] / draws as f64;
            let var = sq[k] / draws as f64 - mean * mean;
            let var_err = (var / (1.0 - ab) - 1.0).abs();
            // relative to the larger of the signal mean and the noise std
            let mean_err = (mean - ab.sqrt() * z0[k]).abs() / (ab.sqrt() * z0[k].abs()).max((1.0 - ab).sqrt());
            worst = worst.max(var_err).max(mean_err);
            pass &= var_err < 0.03 && mean_err < 0.03;
        }
    }
    let took = start.elapsed();
    (
        pass && took < Duration::from_secs(60),
        format!("worst relative moment error {worst:.4} (< 0.03), {}", secs(took)),
    )
}

fn criterion_2() -> (bool, String) {
    let start = Instant::now();
    let cfg = DenoiserConfig {
        model_dim: 16,
        layers: 2,
        heads: 2,
        ff_dim: 32,
        max_frames: 8,
        motion_dim: 6,
        text_dim: 5,
        cond_dim: 12,
        dropout: 0.1,
        max_timestep: 50,
    };
    let mut model = Denoiser::<f64>::new(cfg.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let jitter = Normal::new(0.0, 0.2).unwrap();
    for (_, mut t) in model.weights.tensors_mut() {
        t.mapv_inplace(|v| v + jitter.sample(&mut rng));
    }
    let (b, n) = (3, 6);
    let mut mask = ndarray::Array2::from_elem((b, n), true);
    mask.slice_mut(ndarray::s![2, 4..]).fill(false);
    let batch = TrainingBatch {
        x0: Array3::from_shape_simple_fn((b, n, 6), || StandardNormal.sample(&mut rng)),
        y0: Array3::from_shape_simple_fn((b, n, 5), || StandardNormal.sample(&mut rng)),
        cond: vec![
            Some(Array1::from_shape_simple_fn(12, || StandardNormal.sample(&mut rng))),
            None,
            Some(Array1::from_shape_simple_fn(12, || StandardNormal.sample(&mut rng))),
        ],
        mask,
        y_known: vec![true, true, false],
    };
    let schedule = make_schedule(ScheduleKind::Cosine, 50).unwrap();
    let step = |m: &Denoiser<f64>| {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        training_step(&batch, m, &schedule, &mut rng, 0.3).unwrap()
    };
    let grad = step(&model).grad;
    let analytic: Vec<Vec<f64>> = grad.tensors().into_iter().map(|(_, t)| t.iter().copied().collect()).collect();
    let sizes: Vec<usize> = analytic.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();
    let h = 1e-5;
    let mut good = 0;
    let coords = 200;
    for _ in 0..coords {
        let mut flat = rng.gen_range(0..total);
        let mut ti = 0;
        while flat >= sizes[ti] {
            flat -= sizes[ti];
            ti += 1;
        }
        let bump = |m: &mut Denoiser<f64>, d: f64| {
            let mut ts = m.weights.tensors_mut();
            *ts[ti].1.iter_mut().nth(flat).unwrap() += d;
        };
        bump(&mut model, h);
        let lp = step(&model).loss;
        bump(&mut model, -2.0 * h);
        let lm = step(&model).loss;
        bump(&mut model, h);
        let numeric = (lp - lm) / (2.0 * h);
        let a = analytic[ti][flat];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if rel < 1e-3 {
            good += 1;
        }
    }
    let frac = good as f64 / coords as f64;
    let took = start.elapsed();
    (
        frac >= 0.99 && took < Duration::from_secs(120),
        format!("{good}/{coords} coordinates within 1e-3 relative error, {}", secs(took)),
    )
}

fn criterion_3(model: &UniModel) -> (bool, String) {
    let start = Instant::now();
    let codec = &model.codec;
    let enc = codec.encoder.build();
    let db = &codec.database;
    let mut exact = 0;
    for l in codec.vocabulary() {
        let v = codec.pca.project(embed_label(enc.as_ref(), l).unwrap().view()).unwrap();
        if knn_decode(v.view(), db).unwrap() == *l {
            exact += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut robust, mut probes) = (0, 0);
    for l in codec.vocabulary() {
        let base = db.get(l).unwrap().to_owned();
        for _ in 0..200 {
            let mut eta: Array1<f64> = Array1::from_shape_simple_fn(base.len(), || StandardNormal.sample(&mut rng));
            let norm = eta.dot(&eta).sqrt();
            eta *= 0.49 * db.min_distance / norm;
            probes += 1;
            if knn_decode((&base + &eta).view(), db).unwrap() == *l {
                robust += 1;
            }
        }
    }
    let took = start.elapsed();
    let v = codec.vocabulary().len();
    (
        exact == v && robust == probes && took < Duration::from_secs(1),
        format!("exact {exact}/{v}, perturbed at 0.49 min distance {robust}/{probes}, {}", secs(took)),
    )
}

fn criterion_4(log_path: &Path, warmup: usize, took: Duration) -> Result<(bool, String), String> {
    let log = read_log(log_path).map_err(|e| e.to_string())?;
    let means: Vec<f64> = log[warmup..]
        .chunks_exact(1000)
        .map(|w| w.iter().map(|r| r.loss).sum::<f64>() / w.len() as f64)
        .collect();
    let monotone = means.windows(2).all(|w| w[1] < w[0]);
    let shown: Vec<String> = means.iter().map(|m| format!("{m:.4}")).collect();
    Ok((
        monotone && means.len() >= 2 && took < Duration::from_secs(3 * 3600),
        format!(
            "{} steps in {}, 1k-window mean loss after warmup [{}]",
            log.len(),
            secs(took),
            shown.join(", ")
        ),
    ))
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let cli = Cli::try_parse_from(std::iter::once("twinstep").chain(args.iter().copied())).map_err(|e| e.to_string())?;
    cli::run(cli).map_err(|e| e.to_string())
}

fn criterion_5(ckpt: &Path, test_dir: &Path, test: &[DatasetRecord], work: &Path) -> Result<(bool, String), String> {
    let out = work.join("annotations");
    run_cli(&[
        "annotate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        test_dir.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])?;
    let oracle = OracleConfig::default();
    let mut acc = 0.0;
    for r in test {
        let pred = read_track(&out.join("tracks").join(format!("{}.json", r.id)))
            .and_then(|f| f.track())
            .map_err(|e| e.to_string())?;
        acc += frame_accuracy(&pred, &oracle_label(&r.motion, &oracle)).map_err(|e| e.to_string())?;
    }
    let acc = acc / test.len() as f64;
    Ok((acc >= 0.85, format!("annotate frame accuracy vs oracle {acc:.3} over {} sequences (>= 0.85)", test.len())))
}

fn criterion_8(model: &UniModel, test: &[DatasetRecord]) -> Result<(bool, String), String> {
    let requests: Vec<Request> = test[..100].iter().map(|r| Request::from_sentence(r.motion.valid_len(), None)).collect();
    let cfg = SamplerConfig { mode: TaskMode::JointUncond, seed: 8, ..SamplerConfig::default() };
    let out = model.generate(&cfg, &requests).map_err(|e| e.to_string())?;
    let oracle = OracleConfig::default();
    let vocab = model.codec.vocabulary();
    let (mut well_formed, mut acc) = (0, 0.0);
    for (q, g) in requests.iter().zip(&out) {
        let (m, t) = (g.motion.as_ref().unwrap(), g.track.as_ref().unwrap());
        let tiles = t.validate().is_ok()
            && t.segments.first().map(|s| s.start) == Some(0)
            && t.n_frames() == q.frames
            && t.segments.iter().all(|s| vocab.contains(&s.label));
        if tiles {
            well_formed += 1;
        }
        acc += frame_accuracy(&oracle_label(m, &oracle), t).map_err(|e| e.to_string())?;
    }
    let acc = acc / out.len() as f64;
    Ok((
        well_formed == out.len() && acc >= 0.70,
        format!(
            "{well_formed}/{} tracks tile [0,N) in vocabulary, oracle self-consistency {acc:.3} (>= 0.70)",
            out.len()
        ),
    ))
}

fn criterion_9(gt: &MetricReport) -> (bool, String) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a: Vec<Array1<f64>> = (0..500)
        .map(|_| Array1::from_shape_simple_fn(8, || StandardNormal.sample(&mut rng)))
        .collect();
    let self_fid = fid(&a, &a).unwrap();
    let n1 = Normal::new(0.0, 1.0).unwrap();
    let n2 = Normal::new(0.0, 2.0).unwrap();
    let x: Vec<Array1<f64>> = (0..100_000).map(|_| Array1::from(vec![n1.sample(&mut rng)])).collect();
    let y: Vec<Array1<f64>> = (0..100_000).map(|_| Array1::from(vec![n2.sample(&mut rng)])).collect();
    let gauss = fid(&x, &y).unwrap();
    let unit = |rng: &mut ChaCha8Rng| {
        let v: Array1<f64> = Array1::from_shape_simple_fn(16, || StandardNormal.sample(rng));
        let n = v.dot(&v).sqrt();
        v / n
    };
    let motion: Vec<Array1<f64>> = (0..10_000).map(|_| unit(&mut rng)).collect();
    let text: Vec<Array1<f64>> = (0..10_000).map(|_| unit(&mut rng)).collect();
    let r = r_precision(&motion, &text, &[1, 2, 3], &mut rng).unwrap();
    let chance = r.iter().enumerate().all(|(i, v)| (v - (i + 1) as f64 / 32.0).abs() <= 0.02);
    let m2m = gt.row("ground_truth").unwrap().m2m.mean;
    let took = start.elapsed();
    (
        self_fid.abs() <= 1e-6
            && (gauss - 1.0).abs() <= 0.05
            && chance
            && m2m == 1.0
            && took < Duration::from_secs(120),
        format!(
            "fid(A,A) {self_fid:.2e}, 1-D FID {gauss:.4} (analytic 1), random R@1..3 {:.4}/{:.4}/{:.4}, GT M2M {m2m}, {}",
            r[0],
            r[1],
            r[2],
            secs(took)
        ),
    )
}

/// A small pipeline from corpus generation to evaluation, used for the
/// dropout-rate log and the re-run determinism check.
fn tiny_pipeline(dir: &Path, steps: u64) -> Result<(MetricReport, String), String> {
    let e = |e: twinstep::Error| e.to_string();
    let corpus = CorpusConfig { train: 200, val: 4, test: 60, seed: 12, ..CorpusConfig::default() };
    let (manifest, train) = generate_split(&corpus, "train").map_err(e)?;
    let (_, test) = generate_split(&corpus, "test").map_err(e)?;
    let mcfg = ModelConfig {
        model_dim: 16,
        layers: 1,
        heads: 2,
        ff_dim: 32,
        text_dim: 8,
        timesteps: 50,
        ..ModelConfig::default()
    };
    let tcfg = TrainConfig {
        steps,
        batch_size: 4,
        warmup_steps: 50,
        checkpoint_every: steps,
        ..TrainConfig::default()
    };
    let model = build_model(&train, &manifest, &mcfg).map_err(e)?;
    let mut trainer = Trainer::new(model, &manifest, &train, tcfg, mcfg.init_seed).map_err(e)?;
    let hash = train_to_dir(&mut trainer, dir).map_err(e)?;
    let (ck, _) = Checkpoint::load(&dir.join("model.safetensors")).map_err(e)?;
    let embedder = train_joint_embedder(&train, &ck.model.codec.encoder, &EmbedderConfig::default()).map_err(e)?;
    let ids: HashSet<String> = train.iter().map(|r| r.id.clone()).collect();
    let cfg = EvalConfig {
        repetitions: 3,
        sampler: SamplerConfig { steps: 10, ..SamplerConfig::default() },
        ..EvalConfig::default()
    };
    let report = evaluate_model(&ck.model, &embedder, &ids, &test, &[TaskMode::T2mFrame, TaskMode::M2t], &cfg).map_err(e)?;
    Ok((report, hash))
}

fn criterion_10(
    model: &UniModel,
    embedder: &twinstep::eval::JointEmbedder,
    ids: &HashSet<String>,
    test: &[DatasetRecord],
    work: &Path,
) -> Result<(bool, String), String> {
    let cfg = EvalConfig {
        repetitions: 10,
        sequences: Some(48),
        sampler: SamplerConfig { steps: 50, ..SamplerConfig::default() },
        ..EvalConfig::default()
    };
    let report = evaluate_model(model, embedder, ids, test, &[TaskMode::T2mFrame, TaskMode::M2t], &cfg)
        .map_err(|e| e.to_string())?;
    println!("{}", report.table());
    let complete = report.rows.iter().all(|r| {
        r.samples.len() == 10
            && [r.frame_accuracy, r.fid_seq, r.m2t, r.r_precision[0]]
                .iter()
                .all(|i| i.half_width.is_finite() && i.half_width >= 0.0)
    });
    let dir = work.join("dropout_run");
    tiny_pipeline(&dir, 10_000)?;
    let log = read_log(&dir.join("train_log.jsonl")).map_err(|e| e.to_string())?;
    let dropped: usize = log.iter().map(|r| r.dropped).sum();
    let drawn: usize = log.iter().map(|r| r.batch).sum();
    let rate = dropped as f64 / drawn as f64;
    Ok((
        complete && log.len() == 10_000 && (rate - 0.10).abs() <= 0.01,
        format!(
            "{} rows x 10 repetitions with 95% half-widths, condition dropout {rate:.4} over {} logged steps",
            report.rows.len(),
            log.len()
        ),
    ))
}

fn criterion_11(ckpt: &Path, work: &Path) -> Result<(bool, String), String> {
    let oracle = OracleConfig::default();
    let sentence = "the figure stand, then walk-fwd, then circle-ccw";
    let (mut edited_hit, mut edited_total, mut kept_hit, mut kept_total, mut used) = (0, 0, 0, 0, 0);
    for seed in 0..10u64 {
        let base = work.join(format!("edit_{seed}"));
        let seed_s = seed.to_string();
        let common = |out: &Path, script: Option<&Path>| {
            let mut args = vec![
                "edit".to_string(),
                "--checkpoint".into(),
                ckpt.display().to_string(),
                "--sentence".into(),
                sentence.into(),
                "--frames".into(),
                "48".into(),
                "--seed".into(),
                seed_s.clone(),
                "--out".into(),
                out.display().to_string(),
            ];
            if let Some(s) = script {
                args.push("--script".into());
                args.push(s.display().to_string());
            }
            let refs: Vec<&str> = args.iter().map(String::as_str).collect();
            run_cli(&refs)
        };
        common(&base.join("plain"), None)?;
        let v1 = read_track(&base.join("plain/track_v1.json"))
            .and_then(|f| f.track())
            .map_err(|e| e.to_string())?;
        let Some((idx, _)) = v1
            .segments
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == "walk-fwd")
            .max_by_key(|(_, s)| s.len())
        else {
            continue;
        };
        used += 1;
        let script = EditScript { edits: vec![Edit { segment: idx, label: Some("circle-cw".into()), end: None }] };
        let script_path = base.join("script.json");
        std::fs::write(&script_path, serde_json::to_string(&script).unwrap()).map_err(|e| e.to_string())?;
        common(&base.join("edited"), Some(&script_path))?;
        let v2 = read_motion(&base.join("edited/motion_v2.json")).map_err(|e| e.to_string())?;
        let labels = oracle_label(&v2, &oracle);
        let got = labels.frame_labels();
        let span = &v1.segments[idx];
        for (i, orig) in v1.frame_labels().iter().enumerate() {
            if (span.start..span.end).contains(&i) {
                edited_total += 1;
                edited_hit += (got[i] == "circle-cw") as usize;
            } else {
                kept_total += 1;
                kept_hit += (got[i] == *orig) as usize;
            }
        }
    }
    if used < 5 {
        return Err(format!("only {used} of 10 stage-one tracks contained a walk-fwd segment"));
    }
    let edited = edited_hit as f64 / edited_total as f64;
    let kept = kept_hit as f64 / kept_total as f64;
    Ok((
        edited >= 0.80 && kept >= 0.80,
        format!("{used} round trips: edited span reads circle-cw on {edited:.3}, unedited spans keep {kept:.3} (>= 0.80 each)"),
    ))
}

fn criterion_12(trained: &UniModel, ckpt: &Path, test: &[DatasetRecord], work: &Path) -> Result<(bool, String), String> {
    let (loaded, _) = Checkpoint::load(ckpt).map_err(|e| e.to_string())?;
    let mut identical = loaded.model == *trained;
    for mode in [TaskMode::T2mHier, TaskMode::M2t, TaskMode::JointUncond] {
        let requests: Vec<Request> = test[..8]
            .iter()
            .map(|r| match mode {
                TaskMode::T2mHier => Request::from_track(r.track.clone().unwrap(), r.global_text.clone()),
                TaskMode::M2t => Request::from_motion(r.motion.clone(), None),
                _ => Request::from_sentence(r.motion.valid_len(), None),
            })
            .collect();
        let cfg = SamplerConfig { mode, steps: 20, seed: 12, ..SamplerConfig::default() };
        let a = trained.generate(&cfg, &requests).map_err(|e| e.to_string())?;
        let b = loaded.model.generate(&cfg, &requests).map_err(|e| e.to_string())?;
        identical &= a == b;
    }
    let (r1, h1) = tiny_pipeline(&work.join("rerun_a"), 300)?;
    let (r2, h2) = tiny_pipeline(&work.join("rerun_b"), 300)?;
    let mut within = true;
    for (a, b) in r1.rows.iter().zip(&r2.rows) {
        let pairs = [
            (a.r_precision[0], b.r_precision[0]),
            (a.r_precision[1], b.r_precision[1]),
            (a.r_precision[2], b.r_precision[2]),
            (a.m2t, b.m2t),
            (a.m2m, b.m2m),
            (a.fid_crop, b.fid_crop),
            (a.fid_seq, b.fid_seq),
            (a.diversity_crop, b.diversity_crop),
            (a.diversity_seq, b.diversity_seq),
            (a.frame_accuracy, b.frame_accuracy),
        ];
        within &= pairs.iter().all(|(x, y)| x.contains(y.mean));
    }
    within &= r1.rows.len() == r2.rows.len();
    Ok((
        identical && within && h1 == h2,
        format!(
            "reloaded checkpoint samples identical: {identical}; re-run checkpoints identical: {}; re-run metric means inside intervals: {within}",
            h1 == h2
        ),
    ))
}

#[test]
fn acceptance_criteria() {
    let mut outcome = Outcome { lines: Vec::new() };
    let (pass, detail) = criterion_1();
    outcome.record(1, pass, detail);
    let (pass, detail) = criterion_2();
    outcome.record(2, pass, detail);

    let work = tempfile::tempdir().unwrap();
    let work = work.path();
    let corpus = CorpusConfig::default();
    let (manifest, train) = generate_split(&corpus, "train").unwrap();
    let (test_manifest, test) = generate_split(&corpus, "test").unwrap();
    let test_dir = work.join("data/test");
    write_dataset(&test_dir, &test_manifest, &test, false).unwrap();

    let mcfg = ModelConfig::default();
    let tcfg = TrainConfig { steps: TRAIN_STEPS, ..TrainConfig::default() };
    let warmup = tcfg.warmup_steps as usize;
    let run_dir = work.join("run");
    let start = Instant::now();
    let model = build_model(&train, &manifest, &mcfg).unwrap();
    let mut trainer = Trainer::new(model, &manifest, &train, tcfg, mcfg.init_seed).unwrap();
    train_to_dir(&mut trainer, &run_dir).unwrap();
    let train_time = start.elapsed();
    let ckpt = run_dir.join("model.safetensors");
    let model = trainer.model.clone();

    let (pass, detail) = criterion_3(&model);
    outcome.record(3, pass, detail);
    outcome.record_result(4, criterion_4(&run_dir.join("train_log.jsonl"), warmup, train_time));
    outcome.record_result(5, criterion_5(&ckpt, &test_dir, &test, work));

    let embedder = train_joint_embedder(&train, &model.codec.encoder, &EmbedderConfig::default()).unwrap();
    println!("evaluator held-out R-precision@1 {:.3}", embedder.gate_score);
    let ids: HashSet<String> = train.iter().map(|r| r.id.clone()).collect();
    let full = EvalConfig { repetitions: 1, ..EvalConfig::default() };
    match evaluate_model(&model, &embedder, &ids, &test, &[TaskMode::T2mFrame, TaskMode::T2mHier], &full) {
        Ok(report) => {
            println!("{}", report.table());
            let frame = report.row("t2m_frame").unwrap();
            let hier = report.row("t2m_hier").unwrap();
            let f = frame.frame_accuracy.mean;
            outcome.record(
                6,
                f >= 0.80,
                format!("t2m_frame oracle agreement {f:.3} over {} tracks (>= 0.80)", test.len()),
            );
            let h = hier.frame_accuracy.mean;
            let (fs, hs) = (frame.fid_seq.mean, hier.fid_seq.mean);
            outcome.record(
                7,
                h >= f - 0.02 && hs <= fs * 1.10,
                format!("t2m_hier agreement {h:.3} vs frame {f:.3} (>= -0.02), fid_seq {hs:.4} vs {fs:.4} (<= +10%)"),
            );
            outcome.record_result(8, criterion_8(&model, &test));
            let (pass, detail) = criterion_9(&report);
            outcome.record(9, pass, detail);
        }
        Err(e) => {
            for n in [6, 7, 8, 9] {
                outcome.record(n, false, format!("evaluation failed: {e}"));
            }
        }
    }
    outcome.record_result(10, criterion_10(&model, &embedder, &ids, &test, work));
    outcome.record_result(11, criterion_11(&ckpt, work));
    outcome.record_result(12, criterion_12(&model, &ckpt, &test, work));

    report_line("acceptance summary");
    outcome.lines.sort_by_key(|l| l.0);
    for (n, pass, detail) in &outcome.lines {
        report_line(&format!("criterion {n:>2}: {} | {detail}", if *pass { "PASS" } else { "FAIL" }));
    }
    let failed: Vec<usize> = outcome.lines.iter().filter(|l| !l.1).map(|l| l.0).collect();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
