//! The `twinstep` command line.

mod config;
mod files;
mod viz;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

pub use config::{apply_override, PathsConfig, RunConfig, CONFIG_ENV, RESOLVED_CONFIG};
pub use files::{
    read_motion, read_track, CaptionTrack, Cue, Edit, EditScript, MotionFile, Provenance, TrackFile,
};
pub use viz::{render_svg, viz_frames};

use crate::data::io::{read_dataset, read_json, write_dataset};
use crate::data::{generate_split, DatasetRecord, FrameLabelTrack, MotionSequence, SPLITS};
use crate::diffusion::{SamplerConfig, TaskMode};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, train_joint_embedder, MetricReport};
use crate::pipeline::{build_model, train_to_dir, Checkpoint, Generated, Request, Trainer, UniModel};

#[derive(Debug, Parser)]
#[command(name = "twinstep", version, about = "Two-timestep motion and frame-text diffusion")]
pub struct Cli {
    /// TOML run config; defaults to $TWINSTEP_CONFIG when set.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.steps=500`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed of the command's random draws.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the train/val/test corpus.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overwrite existing dataset directories.
        #[arg(long)]
        force: bool,
    },
    /// Train a model on `<data>/train`.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample in one task mode.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mode: Option<TaskMode>,
        /// Frame-level track file.
        #[arg(long)]
        track: Option<PathBuf>,
        /// Sequence-level sentence.
        #[arg(long)]
        sentence: Option<String>,
        /// Motion file (JSON, or a matrix with a sidecar manifest).
        #[arg(long)]
        motion: Option<PathBuf>,
        /// Length of sequences generated from a sentence or from nothing.
        #[arg(long)]
        frames: Option<usize>,
        /// Dataset directory to take inputs from, together with `--record`.
        #[arg(long, requires = "record")]
        data: Option<PathBuf>,
        #[arg(long, requires = "data")]
        record: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Caption a motion with frame-level text.
    Annotate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "data", required_unless_present = "data")]
        motion: Option<PathBuf>,
        /// Annotate every record of a dataset directory.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, conflicts_with = "data")]
        sentence: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate from a sentence, edit the emitted track and regenerate.
    Edit {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sentence: String,
        /// JSON edit script; no script means no edits.
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long)]
        frames: Option<usize>,
        /// t2m_frame or t2m_hier.
        #[arg(long, default_value = "t2m_frame")]
        regen_mode: TaskMode,
        /// Seed of the regeneration; defaults to `--seed`.
        #[arg(long)]
        regen_seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score task modes on `<data>/test`.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Modes to score; all of them by default.
        #[arg(long = "mode", value_delimiter = ',')]
        modes: Vec<TaskMode>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a motion and its track as an animated SVG.
    ExportViz {
        #[arg(long)]
        motion: PathBuf,
        #[arg(long)]
        track: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub const MOTION_FILE: &str = "motion.json";
pub const TRACK_FILE: &str = "track.json";
pub const CAPTION_FILE: &str = "captions.vtt";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TABLE: &str = "report.txt";
pub const ANIMATION_FILE: &str = "animation.svg";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOutput {
    pub provenance: Provenance,
    /// Held-out R-precision@1 of the evaluator embedding.
    pub embedder_gate: f64,
    pub report: MetricReport,
}

fn load_model(path: &Path) -> Result<(UniModel, String)> {
    let (ck, hash) = Checkpoint::load(path)?;
    Ok((ck.model, hash))
}

fn provenance(command: &str, mode: Option<TaskMode>, seed: u64, hash: &str) -> Provenance {
    Provenance {
        mode: mode.map(|m| m.name().to_string()),
        seed: Some(seed),
        checkpoint: Some(hash.to_string()),
        ..Provenance::new(command)
    }
}

fn write_track(dir: &Path, stem: &str, track: &FrameLabelTrack, fps: u32, prov: &Provenance) -> Result<()> {
    files::write(&dir.join(format!("{stem}.json")), &TrackFile::new(track, fps, Some(prov.clone())))?;
    CaptionTrack::from_track(track, fps)?.write(&dir.join(format!("{stem}.vtt")))
}

fn find_record(dir: &Path, id: &str) -> Result<DatasetRecord> {
    let (_, records) = read_dataset(dir)?;
    records
        .into_iter()
        .find(|r| r.id == id)
        .ok_or_else(|| Error::invalid(format!("{} has no record {id}", dir.display())))
}

/// Builds the request of `mode` from the inputs at hand, refusing missing or
/// forbidden ones.
pub fn build_request(
    mode: TaskMode,
    motion: Option<MotionSequence>,
    track: Option<FrameLabelTrack>,
    sentence: Option<String>,
    frames: usize,
) -> Result<Request> {
    let missing = |what: &str| Error::usage(format!("mode {mode} needs {what}"));
    if mode.forbids_sentence() && sentence.is_some() {
        return Err(Error::usage(format!("mode {mode} takes no sentence")));
    }
    if mode.needs_sentence() && sentence.is_none() {
        return Err(missing("--sentence"));
    }
    if mode.needs_track() {
        let track = track.ok_or_else(|| missing("--track"))?;
        return Ok(Request::from_track(track, sentence));
    }
    if mode.needs_motion() {
        let motion = motion.ok_or_else(|| missing("--motion"))?;
        return Ok(Request::from_motion(motion, sentence));
    }
    Ok(Request::from_sentence(frames, sentence))
}

fn generate_one(model: &UniModel, cfg: &SamplerConfig, request: Request) -> Result<Generated> {
    Ok(model.generate(cfg, &[request])?.remove(0))
}

/// Runs one command and returns its stdout summary.
pub fn run(cli: Cli) -> Result<String> {
    let config_path = cli.config.clone().or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let mut cfg = RunConfig::resolve(config_path.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::GenData { out, force } => {
            if let Some(s) = cli.seed {
                cfg.corpus.seed = s;
            }
            let out = out.unwrap_or_else(|| cfg.paths.data_dir.clone());
            let mut lines = Vec::new();
            for split in SPLITS {
                let (manifest, records) = generate_split(&cfg.corpus, split)?;
                write_dataset(&out.join(split), &manifest, &records, force)?;
                lines.push(format!("{split}: {} records", records.len()));
            }
            cfg.echo(&out)?;
            Ok(lines.join("\n"))
        }
        Command::Train { data, out, resume } => {
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            let data = data.unwrap_or_else(|| cfg.paths.data_dir.clone());
            let out = out.unwrap_or_else(|| cfg.paths.run_dir.clone());
            let (manifest, records) = read_dataset(&data.join("train"))?;
            let mut trainer = match resume {
                Some(path) => {
                    let (ck, hash) = Checkpoint::load(&path)?;
                    Trainer::resume(ck, &hash, &manifest, &records, cfg.train.clone())?
                }
                None => {
                    let model = build_model(&records, &manifest, &cfg.model)?;
                    Trainer::new(model, &manifest, &records, cfg.train.clone(), cfg.model.init_seed)?
                }
            };
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            cfg.echo(&out)?;
            let hash = train_to_dir(&mut trainer, &out)?;
            Ok(format!("checkpoint {hash}"))
        }
        Command::Sample { checkpoint, mode, track, sentence, motion, frames, data, record, out } => {
            let (model, hash) = load_model(&checkpoint)?;
            let mode = mode.unwrap_or(cfg.sampler.mode);
            let seed = cli.seed.unwrap_or(cfg.sampler.seed);
            cfg.sampler.mode = mode;
            cfg.sampler.seed = seed;
            let rec = match (data, record) {
                (Some(d), Some(id)) => Some(find_record(&d, &id)?),
                _ => None,
            };
            let motion = match motion {
                Some(p) => Some(read_motion(&p)?),
                None => rec.as_ref().filter(|_| mode.needs_motion()).map(|r| r.motion.clone()),
            };
            let track = match track {
                Some(p) => Some(read_track(&p)?.track()?),
                None => rec.as_ref().filter(|_| mode.needs_track()).and_then(|r| r.track.clone()),
            };
            let sentence = sentence.or_else(|| {
                rec.as_ref()
                    .filter(|_| mode.needs_sentence())
                    .and_then(|r| r.global_text.clone())
            });
            let frames = frames
                .or(rec.as_ref().map(|r| r.motion.valid_len()))
                .unwrap_or(model.max_frames());
            let request = build_request(mode, motion, track, sentence, frames)?;
            let fps = request.motion.as_ref().map_or(model.fps, |m| m.fps);
            let generated = generate_one(&model, &cfg.sampler, request)?;
            let prov = provenance("sample", Some(mode), seed, &hash);
            let mut written = Vec::new();
            if let Some(m) = &generated.motion {
                files::write(&out.join(MOTION_FILE), &MotionFile::new(m, Some(prov.clone())))?;
                written.push(out.join(MOTION_FILE));
            }
            if let Some(t) = &generated.track {
                write_track(&out, "track", t, fps, &prov)?;
                written.push(out.join(TRACK_FILE));
            }
            cfg.echo(&out)?;
            Ok(written.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join("\n"))
        }
        Command::Annotate { checkpoint, motion, data, sentence, out } => {
            let (model, hash) = load_model(&checkpoint)?;
            let seed = cli.seed.unwrap_or(cfg.sampler.seed);
            let sampler = SamplerConfig { mode: TaskMode::M2t, seed, ..cfg.sampler.clone() };
            let prov = provenance("annotate", Some(TaskMode::M2t), seed, &hash);
            let summary = match (motion, data) {
                (Some(path), _) => {
                    let m = read_motion(&path)?;
                    let fps = m.fps;
                    let g = generate_one(&model, &sampler, Request::from_motion(m, sentence))?;
                    let track = g.track.expect("m2t emits a track");
                    files::write(&out.join(TRACK_FILE), &TrackFile::new(&track, fps, Some(prov)))?;
                    CaptionTrack::from_track(&track, fps)?.write(&out.join(CAPTION_FILE))?;
                    format!("{} segments", track.segments.len())
                }
                (None, Some(dir)) => {
                    let (_, records) = read_dataset(&dir)?;
                    let requests: Vec<Request> =
                        records.iter().map(|r| Request::from_motion(r.motion.clone(), None)).collect();
                    let generated = model.generate(&sampler, &requests)?;
                    for (r, g) in records.iter().zip(generated) {
                        let track = g.track.expect("m2t emits a track");
                        let tracks = out.join("tracks");
                        files::write(
                            &tracks.join(format!("{}.json", r.id)),
                            &TrackFile::new(&track, r.motion.fps, Some(prov.clone())),
                        )?;
                        CaptionTrack::from_track(&track, r.motion.fps)?
                            .write(&out.join("captions").join(format!("{}.vtt", r.id)))?;
                    }
                    format!("{} records annotated", records.len())
                }
                (None, None) => return Err(Error::usage("annotate needs --motion or --data")),
            };
            cfg.echo(&out)?;
            Ok(summary)
        }
        Command::Edit { checkpoint, sentence, script, frames, regen_mode, regen_seed, out } => {
            if !matches!(regen_mode, TaskMode::T2mFrame | TaskMode::T2mHier) {
                return Err(Error::usage("--regen-mode must be t2m_frame or t2m_hier"));
            }
            let (model, hash) = load_model(&checkpoint)?;
            let script: EditScript = match script {
                Some(p) => read_json(&p).map_err(|e| Error::usage(e.to_string()))?,
                None => EditScript::default(),
            };
            let seed = cli.seed.unwrap_or(cfg.sampler.seed);
            let regen_seed = regen_seed.unwrap_or(seed);
            let frames = frames.unwrap_or(model.max_frames());
            let fps = model.fps;

            let stage1 = SamplerConfig { mode: TaskMode::JointCond, seed, ..cfg.sampler.clone() };
            let v1 = generate_one(&model, &stage1, Request::from_sentence(frames, Some(sentence.clone())))?;
            let (motion_v1, track_v1) = (v1.motion.expect("joint motion"), v1.track.expect("joint track"));
            let edited = script.apply(&track_v1, model.codec.vocabulary())?;

            let prov1 = provenance("edit", Some(TaskMode::JointCond), seed, &hash);
            let prov_edit = Provenance { edits: script.edits.clone(), ..prov1.clone() };
            let prov2 = Provenance {
                edits: script.edits.clone(),
                ..provenance("edit", Some(regen_mode), regen_seed, &hash)
            };
            let stage3 = SamplerConfig { mode: regen_mode, seed: regen_seed, ..cfg.sampler.clone() };
            let hier_sentence = (regen_mode == TaskMode::T2mHier).then_some(sentence);
            let v2 = generate_one(&model, &stage3, Request::from_track(edited.clone(), hier_sentence))?;
            let motion_v2 = v2.motion.expect("t2m motion");

            files::write(&out.join("motion_v1.json"), &MotionFile::new(&motion_v1, Some(prov1.clone())))?;
            write_track(&out, "track_v1", &track_v1, fps, &prov1)?;
            write_track(&out, "track_edited", &edited, fps, &prov_edit)?;
            files::write(&out.join("motion_v2.json"), &MotionFile::new(&motion_v2, Some(prov2)))?;
            cfg.echo(&out)?;
            Ok(format!(
                "{} edits applied; track has {} segments",
                script.edits.len(),
                edited.segments.len()
            ))
        }
        Command::Eval { checkpoint, data, modes, out } => {
            if let Some(s) = cli.seed {
                cfg.eval.seed = s;
            }
            let (model, hash) = load_model(&checkpoint)?;
            let data = data.unwrap_or_else(|| cfg.paths.data_dir.clone());
            let (_, train) = read_dataset(&data.join("train"))?;
            let (_, test) = read_dataset(&data.join("test"))?;
            let modes = if modes.is_empty() { TaskMode::ALL.to_vec() } else { modes };
            let embedder = train_joint_embedder(&train, &model.codec.encoder, &cfg.embedder)?;
            let train_ids = train.iter().map(|r| r.id.clone()).collect();
            let report = evaluate_model(&model, &embedder, &train_ids, &test, &modes, &cfg.eval)?;
            let table = report.table();
            let output = EvalOutput {
                provenance: Provenance {
                    seed: Some(cfg.eval.seed),
                    checkpoint: Some(hash),
                    ..Provenance::new("eval")
                },
                embedder_gate: embedder.gate_score,
                report,
            };
            files::write(&out.join(REPORT_JSON), &output)?;
            fs::write(out.join(REPORT_TABLE), &table).map_err(|e| Error::io(out.join(REPORT_TABLE), e))?;
            cfg.echo(&out)?;
            Ok(table)
        }
        Command::ExportViz { motion, track, out } => {
            let m = read_motion(&motion)?;
            let t = read_track(&track)?.track()?;
            let svg = render_svg(&m, &t)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let path = out.join(ANIMATION_FILE);
            fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
            cfg.echo(&out)?;
            Ok(path.display().to_string())
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(summary) => {
            if !summary.is_empty() {
                println!("{}", summary.trim_end());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
