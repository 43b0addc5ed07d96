//! Toy contrastive joint embedding of motion crops and label texts.
//!
//! Motion crops are summarized by a handful of translation- and
//! rotation-invariant statistics (speed, forward/lateral velocity, turning
//! rate) and mapped through a one-hidden-layer network; texts are mapped
//! linearly from their raw encoder embedding. Both outputs are unit vectors.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::metrics::r_precision_against;
use crate::codec::{embed_texts, EncoderSpec};
use crate::data::{feature, generator::wrap_angle, DatasetRecord, MotionSequence};
use crate::error::{Error, Result};

pub const FEATURES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub dim: usize,
    pub hidden: usize,
    pub temperature: f64,
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Smallest acceptable held-out R-precision@1.
    pub gate: f64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            dim: 32,
            hidden: 64,
            temperature: 0.1,
            steps: 600,
            batch: 256,
            learning_rate: 3e-3,
            seed: 0,
            gate: 0.60,
        }
    }
}

/// Invariant summary statistics of frames `start..end` of a motion.
pub fn crop_features(motion: &MotionSequence, start: usize, end: usize) -> Result<Array1<f64>> {
    if motion.dim() != feature::DIM {
        return Err(Error::invalid(format!(
            "the evaluator understands {}-feature motion, got {}",
            feature::DIM,
            motion.dim()
        )));
    }
    if start >= end || end > motion.len() {
        return Err(Error::invalid(format!("crop {start}..{end} is outside the motion")));
    }
    let f = &motion.frames;
    let mut speed = Vec::new();
    let mut fwd = Vec::new();
    let mut lat = Vec::new();
    let mut turn = Vec::new();
    for i in start..end {
        let (vx, vy) = (f[[i, feature::VEL_X]], f[[i, feature::VEL_Y]]);
        let h = f[[i, feature::HEADING_SIN]].atan2(f[[i, feature::HEADING_COS]]);
        speed.push((vx * vx + vy * vy).sqrt());
        fwd.push(vx * h.cos() + vy * h.sin());
        lat.push(-vx * h.sin() + vy * h.cos());
        if i > start {
            let prev = f[[i - 1, feature::HEADING_SIN]].atan2(f[[i - 1, feature::HEADING_COS]]);
            turn.push(wrap_angle(h - prev));
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let std = |v: &[f64]| {
        let m = mean(v);
        mean(&v.iter().map(|x| (x - m).powi(2)).collect::<Vec<_>>()).sqrt()
    };
    let abs = |v: &[f64]| v.iter().map(|x| x.abs()).collect::<Vec<_>>();
    let lat_switch: Vec<f64> = lat.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    Ok(Array1::from(vec![
        mean(&speed),
        std(&speed),
        mean(&fwd),
        mean(&lat),
        mean(&abs(&lat)),
        std(&lat),
        mean(&turn),
        mean(&abs(&turn)),
        std(&turn),
        mean(&lat_switch),
    ]))
}

fn normalize_rows(z: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = z.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(1e-12));
    let mut out = z.clone();
    for (mut row, &n) in out.rows_mut().into_iter().zip(&norms) {
        row /= n;
    }
    (out, norms)
}

/// Backpropagates through row normalization `u = z / |z|`.
fn normalize_rows_backward(u: &Array2<f64>, norms: &Array1<f64>, du: &Array2<f64>) -> Array2<f64> {
    let mut dz = du.clone();
    for i in 0..u.nrows() {
        let dot = u.row(i).dot(&du.row(i));
        let mut row = dz.row_mut(i);
        row.scaled_add(-dot, &u.row(i));
        row /= norms[i];
    }
    dz
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointEmbedder {
    pub encoder: EncoderSpec,
    pub feature_mean: Array1<f64>,
    pub feature_std: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub text_w: Array2<f64>,
    /// Held-out R-precision@1 reached during training.
    pub gate_score: f64,
}

struct Hidden {
    input: Array2<f64>,
    act: Array2<f64>,
    z: Array2<f64>,
}

impl JointEmbedder {
    fn motion_forward(&self, feats: &Array2<f64>) -> Hidden {
        let input = (feats - &self.feature_mean) / &self.feature_std;
        let act = (input.dot(&self.w1) + &self.b1).mapv(f64::tanh);
        let z = act.dot(&self.w2);
        Hidden { input, act, z }
    }

    pub fn embed_features(&self, feats: &Array2<f64>) -> Array2<f64> {
        normalize_rows(&self.motion_forward(feats).z).0
    }

    /// Embeds frames `start..end` of a motion.
    pub fn embed_crop(&self, motion: &MotionSequence, start: usize, end: usize) -> Result<Array1<f64>> {
        let f = crop_features(motion, start, end)?.insert_axis(Axis(0));
        Ok(self.embed_features(&f).row(0).to_owned())
    }

    /// Embeds the valid part of a whole motion.
    pub fn embed_motion(&self, motion: &MotionSequence) -> Result<Array1<f64>> {
        self.embed_crop(motion, 0, motion.valid_len())
    }

    pub fn embed_raw_texts(&self, raw: &Array2<f64>) -> Array2<f64> {
        normalize_rows(&raw.dot(&self.text_w)).0
    }

    pub fn embed_texts(&self, texts: &[String]) -> Result<Vec<Array1<f64>>> {
        let raw = embed_texts(self.encoder.build().as_ref(), texts)?;
        let m = stack(&raw)?;
        Ok(self.embed_raw_texts(&m).rows().into_iter().map(|r| r.to_owned()).collect())
    }

    pub fn dim(&self) -> usize {
        self.w2.ncols()
    }
}

fn stack(rows: &[Array1<f64>]) -> Result<Array2<f64>> {
    let d = rows.first().map_or(0, |r| r.len());
    let mut m = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        if r.len() != d {
            return Err(Error::invalid("rows differ in width"));
        }
        m.row_mut(i).assign(r);
    }
    Ok(m)
}

/// Segment crops of every annotated record: `(features, label)`.
pub fn labeled_crops(records: &[DatasetRecord]) -> Result<Vec<(Array1<f64>, String)>> {
    let mut out = Vec::new();
    for r in records {
        if let Some(t) = &r.track {
            for seg in &t.segments {
                out.push((crop_features(&r.motion, seg.start, seg.end)?, seg.label.clone()));
            }
        }
    }
    Ok(out)
}

struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl Adam {
    fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[Array2<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - 0.9f64.powi(self.t);
        let c2 = 1.0 - 0.999f64.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.m[k] = &self.m[k] * 0.9 + g * 0.1;
            self.v[k] = &self.v[k] * 0.999 + &(g * g) * 0.001;
            let upd = (&self.m[k] / c1) / ((&self.v[k] / c2).mapv(f64::sqrt) + 1e-8);
            p.scaled_add(-lr, &upd);
        }
    }
}

/// Trains the embedder on the segment crops of `records`, holding out a fifth
/// of the crops for the R-precision@1 sanity gate.
pub fn train_joint_embedder(
    records: &[DatasetRecord],
    encoder: &EncoderSpec,
    cfg: &EmbedderConfig,
) -> Result<JointEmbedder> {
    let mut crops = labeled_crops(records)?;
    if crops.len() < 5 * super::metrics::POOL {
        return Err(Error::invalid(format!("need at least 160 labeled crops, got {}", crops.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    crops.shuffle(&mut rng);
    let held = crops.split_off(crops.len() * 4 / 5);

    let labels: Vec<String> = crops
        .iter()
        .map(|(_, l)| l.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if labels.len() < 2 {
        return Err(Error::invalid("contrastive training needs at least two labels"));
    }
    let label_index: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let raw_text = stack(&embed_texts(encoder.build().as_ref(), &labels)?)?;
    let feats = stack(&crops.iter().map(|(f, _)| f.clone()).collect::<Vec<_>>())?;
    let feature_mean = feats.mean_axis(Axis(0)).expect("non-empty");
    // statistics that are constant on clean data (speed spread while walking)
    // get a floor, so small deviations in generated motion stay small
    let spread = feats.std_axis(Axis(0), 0.0);
    let floor = (0.25 * spread.mean().unwrap_or(0.0)).max(1e-8);
    let feature_std = spread.mapv(|s| s.max(floor));

    let (d_in, h, d, d_raw) = (FEATURES, cfg.hidden, cfg.dim, raw_text.ncols());
    let mut init = |rows: usize, cols: usize| {
        let g = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("valid std");
        Array2::from_shape_simple_fn((rows, cols), || g.sample(&mut rng))
    };
    let mut emb = JointEmbedder {
        encoder: encoder.clone(),
        feature_mean,
        feature_std,
        w1: init(d_in, h),
        b1: Array1::zeros(h),
        w2: init(h, d),
        text_w: init(d_raw, d),
        gate_score: 0.0,
    };
    let mut adam = Adam {
        m: vec![Array2::zeros((d_in, h)), Array2::zeros((1, h)), Array2::zeros((h, d)), Array2::zeros((d_raw, d))],
        v: vec![Array2::zeros((d_in, h)), Array2::zeros((1, h)), Array2::zeros((h, d)), Array2::zeros((d_raw, d))],
        t: 0,
    };
    let tau = cfg.temperature;
    let n_labels = labels.len();
    let mut order: Vec<usize> = (0..crops.len()).collect();
    for _ in 0..cfg.steps {
        order.shuffle(&mut rng);
        let idx = &order[..cfg.batch.min(order.len())];
        let b = idx.len();
        let mut fb = Array2::zeros((b, d_in));
        let mut target = vec![0usize; b];
        for (r, &i) in idx.iter().enumerate() {
            fb.row_mut(r).assign(&crops[i].0);
            target[r] = label_index[crops[i].1.as_str()];
        }
        let hid = emb.motion_forward(&fb);
        let (um, nm) = normalize_rows(&hid.z);
        let zt = raw_text.dot(&emb.text_w);
        let (ut, nt) = normalize_rows(&zt);
        let sim = um.dot(&ut.t()) / tau;

        // motion -> text: softmax over labels per crop
        let mut dsim = Array2::<f64>::zeros((b, n_labels));
        for r in 0..b {
            let row = sim.row(r);
            let mx = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let e = row.mapv(|v| (v - mx).exp());
            let z = e.sum();
            for k in 0..n_labels {
                dsim[[r, k]] += (e[k] / z - if k == target[r] { 1.0 } else { 0.0 }) / b as f64;
            }
        }
        // text -> motion: softmax over crops per label, all same-label crops positive
        let present: Vec<usize> = (0..n_labels).filter(|k| target.contains(k)).collect();
        for &k in &present {
            let col = sim.column(k);
            let mx = col.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let e = col.mapv(|v| (v - mx).exp());
            let z = e.sum();
            let pos = target.iter().filter(|&&t| t == k).count() as f64;
            for r in 0..b {
                let p = if target[r] == k { 1.0 / pos } else { 0.0 };
                dsim[[r, k]] += (e[r] / z - p) / present.len() as f64;
            }
        }
        let dsim = dsim / tau;
        let dum = dsim.dot(&ut);
        let dut = dsim.t().dot(&um);
        let dz = normalize_rows_backward(&um, &nm, &dum);
        let dzt = normalize_rows_backward(&ut, &nt, &dut);
        let g_text = raw_text.t().dot(&dzt);
        let g_w2 = hid.act.t().dot(&dz);
        let dact = dz.dot(&emb.w2.t()) * hid.act.mapv(|a| 1.0 - a * a);
        let g_w1 = hid.input.t().dot(&dact);
        let g_b1 = dact.sum_axis(Axis(0)).insert_axis(Axis(0));
        let mut b1 = emb.b1.clone().insert_axis(Axis(0));
        adam.step(
            &mut [&mut emb.w1, &mut b1, &mut emb.w2, &mut emb.text_w],
            &[g_w1, g_b1, g_w2, g_text],
            cfg.learning_rate,
        );
        emb.b1 = b1.slice(s![0, ..]).to_owned();
    }

    let held: Vec<(Array1<f64>, String)> = held
        .into_iter()
        .filter(|(_, l)| label_index.contains_key(l.as_str()))
        .collect();
    let hf = stack(&held.iter().map(|(f, _)| f.clone()).collect::<Vec<_>>())?;
    let hm: Vec<Array1<f64>> = emb.embed_features(&hf).rows().into_iter().map(|r| r.to_owned()).collect();
    let tx = emb.embed_raw_texts(&raw_text);
    let ht: Vec<Array1<f64>> = held
        .iter()
        .map(|(_, l)| tx.row(label_index[l.as_str()]).to_owned())
        .collect();
    // distractor texts come from every crop, not only the held-out ones
    let pool: Vec<Array1<f64>> = crops
        .iter()
        .chain(&held)
        .map(|(_, l)| tx.row(label_index[l.as_str()]).to_owned())
        .collect();
    let score = r_precision_against(&hm, &ht, &pool, &[1], &mut rng)?[0];
    emb.gate_score = score;
    log::info!("joint embedder held-out R-precision@1 {score:.3}");
    if score < cfg.gate {
        return Err(Error::Numerical(format!(
            "joint embedder failed its sanity gate: R-precision@1 {score:.3} < {}",
            cfg.gate
        )));
    }
    Ok(emb)
}
