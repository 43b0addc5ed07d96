use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::embedder::JointEmbedder;
use super::metrics::{diversity, fid, frame_accuracy, m2m_score, m2t_score, r_precision_against, Interval, POOL};
use crate::data::{oracle_label, DatasetRecord, FrameLabelTrack, MotionSequence, OracleConfig};
use crate::diffusion::{item_seed, SamplerConfig, TaskMode};
use crate::error::{Error, Result};
use crate::pipeline::{Request, UniModel};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub repetitions: usize,
    /// Evaluate only the first this-many test sequences.
    pub sequences: Option<usize>,
    pub diversity_pairs: usize,
    pub seed: u64,
    pub sampler: SamplerConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            repetitions: 10,
            sequences: None,
            diversity_pairs: 300,
            seed: 0,
            sampler: SamplerConfig::default(),
        }
    }
}

/// Metrics of one repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub r_precision: [f64; 3],
    pub m2t: f64,
    pub m2m: f64,
    pub fid_crop: f64,
    pub fid_seq: f64,
    pub diversity_crop: f64,
    pub diversity_seq: f64,
    pub frame_accuracy: f64,
}

/// Metrics of one mode over all repetitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// Task mode name, or `ground_truth` for the reference row.
    pub mode: String,
    pub r_precision: [Interval; 3],
    pub m2t: Interval,
    pub m2m: Interval,
    pub fid_crop: Interval,
    pub fid_seq: Interval,
    pub diversity_crop: Interval,
    pub diversity_seq: Interval,
    pub frame_accuracy: Interval,
    pub samples: Vec<MetricSample>,
}

impl MetricRow {
    fn from_samples(mode: &str, samples: Vec<MetricSample>) -> Result<Self> {
        let col = |f: &dyn Fn(&MetricSample) -> f64| Interval::from_samples(&samples.iter().map(f).collect::<Vec<_>>());
        Ok(MetricRow {
            mode: mode.to_string(),
            r_precision: [
                col(&|s| s.r_precision[0])?,
                col(&|s| s.r_precision[1])?,
                col(&|s| s.r_precision[2])?,
            ],
            m2t: col(&|s| s.m2t)?,
            m2m: col(&|s| s.m2m)?,
            fid_crop: col(&|s| s.fid_crop)?,
            fid_seq: col(&|s| s.fid_seq)?,
            diversity_crop: col(&|s| s.diversity_crop)?,
            diversity_seq: col(&|s| s.diversity_seq)?,
            frame_accuracy: col(&|s| s.frame_accuracy)?,
            samples,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub repetitions: usize,
    pub sequences: usize,
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn row(&self, mode: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    /// Plain-text table: per-crop semantic columns, then per-sequence realism.
    pub fn table(&self) -> String {
        let cell = |i: &Interval| format!("{:.3}±{:.3}", i.mean, i.half_width);
        let header = [
            "mode", "R@1", "R@2", "R@3", "M2T", "M2M", "FID crop", "FID seq", "Div crop", "Div seq", "Frame acc",
        ];
        let mut lines: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for r in &self.rows {
            lines.push(vec![
                r.mode.clone(),
                cell(&r.r_precision[0]),
                cell(&r.r_precision[1]),
                cell(&r.r_precision[2]),
                cell(&r.m2t),
                cell(&r.m2m),
                cell(&r.fid_crop),
                cell(&r.fid_seq),
                cell(&r.diversity_crop),
                cell(&r.diversity_seq),
                cell(&r.frame_accuracy),
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, l) in lines.iter().enumerate() {
            let cells: Vec<String> = l.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
            if i == 0 {
                let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            }
        }
        out
    }
}

/// Output of one sequence, in data space.
#[derive(Debug, Clone)]
pub struct Sampled {
    pub motion: MotionSequence,
    /// Segments defining the crops, each with its text label.
    pub crops: FrameLabelTrack,
    /// Frame-level prediction of the sequence and the track it is scored against.
    pub accuracy_pair: (FrameLabelTrack, FrameLabelTrack),
}

/// Ground-truth embeddings shared by every repetition.
struct Reference {
    crops: Vec<Array1<f64>>,
    crop_labels: Vec<String>,
    by_label: BTreeMap<String, Vec<usize>>,
    seqs: Vec<Array1<f64>>,
    texts: BTreeMap<String, Array1<f64>>,
}

impl Reference {
    fn new(embedder: &JointEmbedder, test: &[DatasetRecord]) -> Result<Self> {
        let mut crops = Vec::new();
        let mut crop_labels = Vec::new();
        let mut by_label: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut seqs = Vec::new();
        for r in test {
            seqs.push(embedder.embed_motion(&r.motion)?);
            if let Some(t) = &r.track {
                for seg in &t.segments {
                    by_label.entry(seg.label.clone()).or_default().push(crops.len());
                    crops.push(embedder.embed_crop(&r.motion, seg.start, seg.end)?);
                    crop_labels.push(seg.label.clone());
                }
            }
        }
        Ok(Reference {
            crops,
            crop_labels,
            by_label,
            seqs,
            texts: BTreeMap::new(),
        })
    }

    fn text(&mut self, embedder: &JointEmbedder, label: &str) -> Result<Array1<f64>> {
        if let Some(v) = self.texts.get(label) {
            return Ok(v.clone());
        }
        let v = embedder.embed_texts(&[label.to_string()])?.remove(0);
        self.texts.insert(label.to_string(), v.clone());
        Ok(v)
    }
}

/// How the generated crops are paired with ground-truth crops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pairing {
    /// Crop `k` of output `i` matches the same span of test sequence `i`.
    Aligned,
    /// Each crop is compared with a random test crop carrying the same label.
    SameLabel,
}

fn pairs_for(n: usize, wanted: usize) -> Result<usize> {
    let p = wanted.min(n / 2);
    if p == 0 {
        return Err(Error::invalid("too few embeddings for diversity"));
    }
    Ok(p)
}

fn score(
    embedder: &JointEmbedder,
    reference: &mut Reference,
    test: &[&DatasetRecord],
    outputs: &[Sampled],
    pairing: Pairing,
    cfg: &EvalConfig,
    rng: &mut ChaCha8Rng,
) -> Result<MetricSample> {
    let mut gen_crops = Vec::new();
    let mut gt_crops = Vec::new();
    let mut texts = Vec::new();
    let mut gen_seqs = Vec::new();
    let mut accuracy = 0.0;
    for (out, rec) in outputs.iter().zip(test) {
        gen_seqs.push(embedder.embed_motion(&out.motion)?);
        accuracy += frame_accuracy(&out.accuracy_pair.0, &out.accuracy_pair.1)?;
        for seg in &out.crops.segments {
            let g = embedder.embed_crop(&out.motion, seg.start, seg.end)?;
            let truth = match pairing {
                Pairing::Aligned => embedder.embed_crop(&rec.motion, seg.start, seg.end)?,
                Pairing::SameLabel => match reference.by_label.get(&seg.label) {
                    Some(ids) => reference.crops[*ids.choose(rng).expect("non-empty")].clone(),
                    None => continue,
                },
            };
            texts.push(reference.text(embedder, &seg.label)?);
            gen_crops.push(g);
            gt_crops.push(truth);
        }
    }
    if gen_crops.len() < POOL {
        return Err(Error::invalid(format!(
            "only {} crops to score; R-precision needs {POOL}",
            gen_crops.len()
        )));
    }
    let pool = reference
        .crop_labels
        .clone()
        .iter()
        .map(|l| reference.text(embedder, l))
        .collect::<Result<Vec<_>>>()?;
    let r = r_precision_against(&gen_crops, &texts, &pool, &[1, 2, 3], rng)?;
    let m2t = gen_crops.iter().zip(&texts).map(|(g, t)| m2t_score(g, t)).sum::<Result<f64>>()? / gen_crops.len() as f64;
    let m2m = gen_crops.iter().zip(&gt_crops).map(|(g, t)| m2m_score(g, t)).sum::<Result<f64>>()? / gen_crops.len() as f64;
    Ok(MetricSample {
        r_precision: [r[0], r[1], r[2]],
        m2t,
        m2m,
        fid_crop: fid(&gen_crops, &reference.crops)?,
        fid_seq: fid(&gen_seqs, &reference.seqs)?,
        diversity_crop: diversity(&gen_crops, pairs_for(gen_crops.len(), cfg.diversity_pairs)?, rng)?,
        diversity_seq: diversity(&gen_seqs, pairs_for(gen_seqs.len(), cfg.diversity_pairs)?, rng)?,
        frame_accuracy: accuracy / outputs.len() as f64,
    })
}

fn request_for(mode: TaskMode, r: &DatasetRecord) -> Option<Request> {
    let n = r.motion.valid_len();
    match mode {
        TaskMode::T2mFrame => r.track.clone().map(|t| Request::from_track(t, None)),
        TaskMode::T2mHier => match (&r.track, &r.global_text) {
            (Some(t), Some(s)) => Some(Request::from_track(t.clone(), Some(s.clone()))),
            _ => None,
        },
        TaskMode::T2mSeq | TaskMode::JointCond => {
            r.global_text.clone().map(|s| Request::from_sentence(n, Some(s)))
        }
        TaskMode::M2t => r.track.as_ref().map(|_| Request::from_motion(r.motion.clone(), None)),
        TaskMode::JointUncond => r.track.as_ref().map(|_| Request::from_sentence(n, None)),
    }
}

/// Runs every mode `cfg.repetitions` times with fresh seeds and aggregates
/// mean and 95% half-width per metric. A ground-truth row (test motions
/// scored as if generated) comes first.
pub fn evaluate_model(
    model: &UniModel,
    embedder: &JointEmbedder,
    train_ids: &HashSet<String>,
    test: &[DatasetRecord],
    modes: &[TaskMode],
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    if let Some(r) = test.iter().find(|r| train_ids.contains(&r.id)) {
        return Err(Error::invalid(format!("test record {} also appears in the training split", r.id)));
    }
    if cfg.repetitions == 0 {
        return Err(Error::invalid("evaluation needs at least one repetition"));
    }
    let test: Vec<DatasetRecord> = test[..cfg.sequences.unwrap_or(test.len()).min(test.len())].to_vec();
    let oracle = OracleConfig::default();
    let mut reference = Reference::new(embedder, &test)?;
    let mut rows = Vec::new();

    let annotated: Vec<&DatasetRecord> = test.iter().filter(|r| r.track.is_some()).collect();
    let gt: Vec<Sampled> = annotated
        .iter()
        .map(|r| {
            let t = r.track.clone().expect("annotated");
            Sampled {
                motion: r.motion.clone(),
                crops: t.clone(),
                accuracy_pair: (oracle_label(&r.motion, &oracle), t),
            }
        })
        .collect();
    let mut samples = Vec::new();
    for rep in 0..cfg.repetitions {
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, rep as u64));
        samples.push(score(embedder, &mut reference, &annotated, &gt, Pairing::Aligned, cfg, &mut rng)?);
    }
    rows.push(MetricRow::from_samples("ground_truth", samples)?);

    for &mode in modes {
        let (recs, requests): (Vec<&DatasetRecord>, Vec<Request>) =
            test.iter().filter_map(|r| request_for(mode, r).map(|q| (r, q))).unzip();
        if requests.is_empty() {
            return Err(Error::invalid(format!("no test record carries the inputs of mode {mode}")));
        }
        let mut samples = Vec::new();
        for rep in 0..cfg.repetitions {
            let seed = item_seed(cfg.seed, rep as u64);
            let sampler = SamplerConfig {
                mode,
                seed,
                ..cfg.sampler.clone()
            };
            let outputs = model.generate(&sampler, &requests)?;
            let sampled: Vec<Sampled> = outputs
                .into_iter()
                .zip(&recs)
                .map(|(g, r)| {
                    let motion = g.motion.unwrap_or_else(|| r.motion.trimmed());
                    let truth = r.track.clone();
                    Ok(match mode {
                        TaskMode::M2t => {
                            let pred = g.track.expect("text mode");
                            Sampled {
                                accuracy_pair: (pred.clone(), oracle_label(&motion, &oracle)),
                                crops: pred,
                                motion,
                            }
                        }
                        TaskMode::JointCond | TaskMode::JointUncond => {
                            let emitted = g.track.expect("text mode");
                            Sampled {
                                accuracy_pair: (oracle_label(&motion, &oracle), emitted.clone()),
                                crops: emitted,
                                motion,
                            }
                        }
                        _ => {
                            let t = truth.ok_or_else(|| Error::invalid(format!("record {} has no track", r.id)))?;
                            Sampled {
                                accuracy_pair: (oracle_label(&motion, &oracle), t.clone()),
                                crops: t,
                                motion,
                            }
                        }
                    })
                })
                .collect::<Result<_>>()?;
            let pairing = match mode {
                TaskMode::JointCond | TaskMode::JointUncond => Pairing::SameLabel,
                _ => Pairing::Aligned,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, 1));
            samples.push(score(embedder, &mut reference, &recs, &sampled, pairing, cfg, &mut rng)?);
        }
        rows.push(MetricRow::from_samples(mode.name(), samples)?);
    }
    Ok(MetricReport {
        schema_version: REPORT_SCHEMA_VERSION,
        repetitions: cfg.repetitions,
        sequences: test.len(),
        rows,
    })
}
