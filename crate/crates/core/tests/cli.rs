use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use twinstep::cli::{read_motion, read_track, MotionFile, TrackFile};
use twinstep::pipeline::content_hash;

const TINY: &str = r#"
[corpus]
train = 80
val = 4
test = 60
seed = 5

[model]
model_dim = 16
layers = 1
heads = 2
ff_dim = 32
text_dim = 8
timesteps = 20

[train]
steps = 30
batch_size = 4
warmup_steps = 5
checkpoint_every = 10

[sampler]
steps = 4

[eval]
repetitions = 2

[eval.sampler]
steps = 3
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_twinstep"));
    c.env_remove("TWINSTEP_CONFIG");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = bin()
        .current_dir(dir)
        .arg("--config")
        .arg(dir.join("tiny.toml"))
        .args(args)
        .output()
        .unwrap();
    out
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    run(dir, args).status.code().unwrap()
}

/// A workspace with a generated corpus and a trained tiny checkpoint.
fn workspace() -> &'static PathBuf {
    static W: OnceLock<PathBuf> = OnceLock::new();
    W.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        fs::write(dir.join("tiny.toml"), TINY).unwrap();
        ok(&dir, &["gen-data", "--out", "data"]);
        ok(&dir, &["train", "--data", "data", "--out", "run"]);
        dir
    })
}

fn ckpt() -> String {
    workspace().join("run/model.safetensors").display().to_string()
}

#[test]
fn gen_data_is_reproducible_and_disjoint() {
    let w = workspace();
    ok(w, &["gen-data", "--out", "data2"]);
    for split in ["train", "val", "test"] {
        for f in ["manifest.json", "records.jsonl"] {
            let a = fs::read(w.join("data").join(split).join(f)).unwrap();
            let b = fs::read(w.join("data2").join(split).join(f)).unwrap();
            assert_eq!(a, b, "{split}/{f}");
        }
    }
    let (m, _) = twinstep::data::io::read_dataset(&w.join("data/test")).unwrap();
    assert_eq!(m.size, 60);
    // existing datasets are not overwritten without --force
    assert_eq!(code(w, &["gen-data", "--out", "data2"]), 2);
    ok(w, &["gen-data", "--out", "data2", "--force"]);
    assert!(fs::read_to_string(w.join("data/config.toml")).unwrap().contains("train = 80"));
}

#[test]
fn train_writes_log_checkpoints_and_config() {
    let w = workspace();
    let log = twinstep::pipeline::read_log(&w.join("run/train_log.jsonl")).unwrap();
    assert_eq!(log.len(), 30);
    assert!(w.join("run/checkpoints/step_000010.safetensors").exists());
    assert!(w.join("run/config.toml").exists());
    // resuming from step 20 with the stored config reproduces the final checkpoint
    let out = w.join("resumed");
    fs::create_dir_all(&out).unwrap();
    fs::copy(w.join("run/train_log.jsonl"), out.join("train_log.jsonl")).unwrap();
    let resume = w.join("run/checkpoints/step_000020.safetensors");
    let printed = ok(w, &["train", "--data", "data", "--out", "resumed", "--resume", resume.to_str().unwrap()]);
    let a = fs::read(w.join("run/model.safetensors")).unwrap();
    let mut final_a = twinstep::pipeline::Checkpoint::from_bytes(&a).unwrap();
    let b = fs::read(out.join("model.safetensors")).unwrap();
    let mut final_b = twinstep::pipeline::Checkpoint::from_bytes(&b).unwrap();
    assert_eq!(final_a.model, final_b.model);
    assert_eq!(final_a.optimizer, final_b.optimizer);
    final_a.lineage.parent = None;
    final_b.lineage.parent = None;
    assert_eq!(final_a.lineage.step, final_b.lineage.step);
    assert!(printed.contains(&content_hash(&b)));
}

#[test]
fn sample_modes_write_provenance_and_are_deterministic() {
    let w = workspace();
    let ck = ckpt();
    let record = ["--data", "data/test", "--record", "test-00003"];
    for (mode, has_motion, has_track) in [
        ("t2m_frame", true, false),
        ("t2m_hier", true, false),
        ("t2m_seq", true, false),
        ("m2t", false, true),
        ("joint_cond", true, true),
        ("joint_uncond", true, true),
    ] {
        let out = format!("s_{mode}");
        let mut args = vec!["sample", "--checkpoint", &ck, "--mode", mode, "--seed", "4", "--out", &out];
        if mode != "joint_uncond" {
            args.extend(record);
        }
        ok(w, &args);
        let dir = w.join(&out);
        assert_eq!(dir.join("motion.json").exists(), has_motion, "{mode}");
        assert_eq!(dir.join("track.json").exists(), has_track, "{mode}");
        let hash = content_hash(&fs::read(w.join("run/model.safetensors")).unwrap());
        if has_motion {
            let f: MotionFile = serde_json::from_str(&fs::read_to_string(dir.join("motion.json")).unwrap()).unwrap();
            let p = f.provenance.unwrap();
            assert_eq!((p.mode.as_deref(), p.seed, p.checkpoint.as_deref()), (Some(mode), Some(4), Some(hash.as_str())));
        }
        if has_track {
            let t = read_track(&dir.join("track.json")).unwrap().track().unwrap();
            assert_eq!(t.segments[0].start, 0);
            assert!(fs::read_to_string(dir.join("track.vtt")).unwrap().starts_with("WEBVTT"));
        }
        assert!(dir.join("config.toml").exists());
    }
    // same seed, same bytes; other seed, other motion
    ok(w, &["sample", "--checkpoint", &ck, "--mode", "joint_uncond", "--seed", "4", "--out", "again"]);
    ok(w, &["sample", "--checkpoint", &ck, "--mode", "joint_uncond", "--seed", "5", "--out", "other"]);
    let a = fs::read(w.join("s_joint_uncond/motion.json")).unwrap();
    assert_eq!(a, fs::read(w.join("again/motion.json")).unwrap());
    let m4 = read_motion(&w.join("s_joint_uncond/motion.json")).unwrap();
    let m5 = read_motion(&w.join("other/motion.json")).unwrap();
    let diff = (&m4.frames - &m5.frames).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
    assert!(diff > 0.0);
}

#[test]
fn missing_or_forbidden_inputs_are_usage_errors() {
    let w = workspace();
    let ck = ckpt();
    assert_eq!(code(w, &["sample", "--checkpoint", &ck, "--mode", "t2m_frame", "--out", "x"]), 2);
    assert_eq!(code(w, &["sample", "--checkpoint", &ck, "--mode", "t2m_hier", "--sentence", "the figure stand", "--out", "x"]), 2);
    assert_eq!(code(w, &["sample", "--checkpoint", &ck, "--mode", "m2t", "--out", "x"]), 2);
    assert_eq!(code(w, &["sample", "--checkpoint", &ck, "--mode", "joint_uncond", "--sentence", "s", "--out", "x"]), 2);
    assert_eq!(code(w, &["sample", "--checkpoint", &ck, "--mode", "fly", "--out", "x"]), 2);
    assert_eq!(code(w, &["--set", "train.stepz=3", "gen-data", "--out", "x"]), 2);
    assert_eq!(code(w, &["nosuch"]), 2);
}

#[test]
fn data_and_numerical_errors_have_their_codes() {
    let w = workspace();
    let ck = ckpt();
    // a 4-feature matrix cannot be annotated by a 6-feature model
    fs::write(w.join("m4.txt"), "0 0 0 0\n1 1 1 1\n2 2 2 2\n").unwrap();
    fs::write(w.join("m4.txt.manifest.json"), r#"{"d_x": 4, "fps": 20}"#).unwrap();
    assert_eq!(code(w, &["annotate", "--checkpoint", &ck, "--motion", "m4.txt", "--out", "x"]), 3);
    fs::write(w.join("garbage.safetensors"), b"not a checkpoint").unwrap();
    assert_eq!(code(w, &["sample", "--checkpoint", "garbage.safetensors", "--mode", "joint_uncond", "--out", "x"]), 3);
    assert_eq!(code(w, &["sample", "--checkpoint", "missing.safetensors", "--mode", "joint_uncond", "--out", "x"]), 3);
    // an unreachable evaluator gate is an internal numerical failure
    assert_eq!(
        code(w, &["--set", "embedder.gate=1.5", "eval", "--checkpoint", &ck, "--data", "data", "--mode", "t2m_frame", "--out", "x"]),
        4
    );
}

#[test]
fn annotate_writes_tracks_and_captions() {
    let w = workspace();
    let ck = ckpt();
    ok(w, &["sample", "--checkpoint", &ck, "--mode", "joint_uncond", "--frames", "40", "--out", "ann_src"]);
    ok(w, &["annotate", "--checkpoint", &ck, "--motion", "ann_src/motion.json", "--out", "ann"]);
    let t: TrackFile = read_track(&w.join("ann/track.json")).unwrap();
    assert_eq!(t.n_frames, 40);
    let vtt = fs::read_to_string(w.join("ann/captions.vtt")).unwrap();
    assert!(vtt.starts_with("WEBVTT\n\n1\n00:00:00.000 --> "));
    assert!(vtt.contains("--> 00:00:02.000\n"));
    ok(w, &["annotate", "--checkpoint", &ck, "--motion", "ann_src/motion.json", "--out", "ann2"]);
    assert_eq!(fs::read(w.join("ann/track.json")).unwrap(), fs::read(w.join("ann2/track.json")).unwrap());
    ok(w, &["annotate", "--checkpoint", &ck, "--data", "data/val", "--out", "ann_val"]);
    assert_eq!(fs::read_dir(w.join("ann_val/tracks")).unwrap().count(), 4);
    assert_eq!(fs::read_dir(w.join("ann_val/captions")).unwrap().count(), 4);
}

#[test]
fn edit_round_trip_artifacts() {
    let w = workspace();
    let ck = ckpt();
    let base = ["edit", "--checkpoint", ck.as_str(), "--sentence", "the figure walk-fwd, then stand", "--frames", "32", "--seed", "2"];
    ok(w, &[&base[..], &["--out", "e0"]].concat());
    let v1 = fs::read(w.join("e0/track_v1.json")).unwrap();
    assert_eq!(v1, fs::read(w.join("e0/track_edited.json")).unwrap());
    for f in ["motion_v1.json", "motion_v2.json", "track_v1.vtt"] {
        assert!(w.join("e0").join(f).exists(), "{f}");
    }
    fs::write(w.join("edit.json"), r#"{"edits": [{"segment": 0, "label": "zigzag"}]}"#).unwrap();
    ok(w, &[&base[..], &["--script", "edit.json", "--out", "e1"]].concat());
    let edited = read_track(&w.join("e1/track_edited.json")).unwrap();
    assert_eq!(edited.segments[0].label, "zigzag");
    assert_eq!(edited.provenance.unwrap().edits.len(), 1);
    ok(w, &[&base[..], &["--script", "edit.json", "--out", "e2"]].concat());
    for f in ["motion_v1.json", "track_edited.json", "motion_v2.json"] {
        assert_eq!(fs::read(w.join("e1").join(f)).unwrap(), fs::read(w.join("e2").join(f)).unwrap());
    }
    fs::write(w.join("bad.json"), r#"{"edits": [{"segment": 99, "label": "zigzag"}]}"#).unwrap();
    assert_eq!(code(w, &[&base[..], &["--script", "bad.json", "--out", "e3"]].concat()), 2);
}

#[test]
fn eval_writes_report_with_provenance() {
    let w = workspace();
    let ck = ckpt();
    let table = ok(w, &["eval", "--checkpoint", &ck, "--data", "data", "--mode", "t2m_frame", "--out", "ev"]);
    assert!(table.contains("ground_truth") && table.contains("t2m_frame"));
    let out: twinstep::cli::EvalOutput =
        serde_json::from_str(&fs::read_to_string(w.join("ev/report.json")).unwrap()).unwrap();
    assert_eq!(out.report.repetitions, 2);
    assert_eq!(out.provenance.checkpoint.unwrap(), content_hash(&fs::read(w.join("run/model.safetensors")).unwrap()));
    assert_eq!(fs::read_to_string(w.join("ev/report.txt")).unwrap(), out.report.table());
}

#[test]
fn export_viz_is_byte_stable() {
    let w = workspace();
    let ck = ckpt();
    ok(w, &["sample", "--checkpoint", &ck, "--mode", "joint_uncond", "--frames", "24", "--out", "viz_src"]);
    let args = ["export-viz", "--motion", "viz_src/motion.json", "--track", "viz_src/track.json", "--out"];
    ok(w, &[&args[..], &["viz1"]].concat());
    ok(w, &[&args[..], &["viz2"]].concat());
    let a = fs::read_to_string(w.join("viz1/animation.svg")).unwrap();
    assert_eq!(a, fs::read_to_string(w.join("viz2/animation.svg")).unwrap());
    assert!(a.contains("data-frames=\"24\""));
}

#[test]
fn config_can_come_from_the_environment() {
    let w = workspace();
    let out = bin()
        .current_dir(w)
        .env("TWINSTEP_CONFIG", w.join("tiny.toml"))
        .args(["gen-data", "--out", "env_data"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let (m, _) = twinstep::data::io::read_dataset(&w.join("env_data/train")).unwrap();
    assert_eq!(m.size, 80);
}
