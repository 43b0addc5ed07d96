use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::FrameLabelTrack;
use crate::error::{Error, Result};

/// Candidate pool size for R-precision: the true text plus 31 distractors.
pub const POOL: usize = 32;

fn norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

/// Cosine similarity of two non-zero vectors.
pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid("cosine of vectors with different widths"));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::invalid("cosine needs finite non-zero vectors"));
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Motion-to-text similarity of one pair.
pub fn m2t_score(motion: &Array1<f64>, text: &Array1<f64>) -> Result<f64> {
    cosine(motion, text)
}

/// Generated-to-ground-truth motion similarity of one pair.
///
/// Identical embeddings score exactly 1, free of rounding in the norms.
pub fn m2m_score(generated: &Array1<f64>, truth: &Array1<f64>) -> Result<f64> {
    let c = cosine(generated, truth)?;
    Ok(if generated == truth { 1.0 } else { c })
}

/// Top-k retrieval rate of each probe's text among itself and 31 distractor
/// texts drawn from other pairs whose text differs from the true one.
///
/// Candidates are ranked by cosine similarity, ties going to the lower pool
/// index; the true text sits at index 0. Returns one rate per entry of `ks`.
pub fn r_precision<R: Rng + ?Sized>(
    motion: &[Array1<f64>],
    text: &[Array1<f64>],
    ks: &[usize],
    rng: &mut R,
) -> Result<Vec<f64>> {
    r_precision_against(motion, text, text, ks, rng)
}

/// Like [`r_precision`], with distractors drawn from `pool` instead of the
/// probes' own texts.
pub fn r_precision_against<R: Rng + ?Sized>(
    motion: &[Array1<f64>],
    text: &[Array1<f64>],
    pool: &[Array1<f64>],
    ks: &[usize],
    rng: &mut R,
) -> Result<Vec<f64>> {
    let n = motion.len();
    if n != text.len() {
        return Err(Error::invalid("r_precision needs one text per motion"));
    }
    if n < POOL {
        return Err(Error::invalid(format!("r_precision needs at least {POOL} pairs, got {n}")));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > POOL) {
        return Err(Error::invalid(format!("k = {k} must lie in 1..={POOL}")));
    }
    let mut hits = vec![0usize; ks.len()];
    for i in 0..n {
        let candidates: Vec<usize> = (0..pool.len()).filter(|&j| pool[j] != text[i]).collect();
        if candidates.len() < POOL - 1 {
            return Err(Error::invalid(format!(
                "probe {i} has only {} distinct distractor texts",
                candidates.len()
            )));
        }
        let truth = cosine(&motion[i], &text[i])?;
        // rank = number of distractors strictly more similar than the truth
        let mut rank = 0;
        for &j in candidates.choose_multiple(rng, POOL - 1) {
            if cosine(&motion[i], &pool[j])? > truth {
                rank += 1;
            }
        }
        for (h, &k) in hits.iter_mut().zip(ks) {
            if rank < k {
                *h += 1;
            }
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / n as f64).collect())
}

fn mean_cov(xs: &[Array1<f64>]) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = xs[0].len();
    let n = xs.len() as f64;
    let mut mean = DMatrix::<f64>::zeros(d, 1);
    for x in xs {
        for k in 0..d {
            mean[k] += x[k];
        }
    }
    mean /= n;
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for x in xs {
        let c = DMatrix::from_fn(d, 1, |k, _| x[k] - mean[k]);
        cov += &c * c.transpose();
    }
    // unbiased estimate; a single sample has zero spread
    if xs.len() > 1 {
        cov /= n - 1.0;
    }
    if xs.len() <= d {
        let ridge = 1e-6 * (cov.trace() / d as f64).max(1e-12);
        for k in 0..d {
            cov[(k, k)] += ridge;
        }
    }
    (mean, cov)
}

fn psd_sqrt(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -1e-8 * eig.eigenvalues.amax().max(1.0) {
            return Err(Error::Numerical(format!("covariance has eigenvalue {v}")));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// Fréchet distance between Gaussians fitted to two embedding sets.
///
/// The cross term is `Tr((√Σa Σb √Σa)^{1/2})`, which equals `Tr((Σa Σb)^{1/2})`
/// and keeps every square root symmetric.
pub fn fid(a: &[Array1<f64>], b: &[Array1<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("fid needs non-empty sets"));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|v| v.len() != d) {
        return Err(Error::invalid("fid sets differ in width"));
    }
    let (ma, ca) = mean_cov(a);
    let (mb, cb) = mean_cov(b);
    let diff = &ma - &mb;
    let root_a = psd_sqrt(ca.clone())?;
    let cross = psd_sqrt(&root_a * &cb * &root_a)?;
    let value = diff.norm_squared() + ca.trace() + cb.trace() - 2.0 * cross.trace();
    if !value.is_finite() {
        return Err(Error::Numerical("fid is not finite".into()));
    }
    Ok(value.max(0.0))
}

/// Mean Euclidean distance over `n_pairs` disjoint random pairs.
pub fn diversity<R: Rng + ?Sized>(xs: &[Array1<f64>], n_pairs: usize, rng: &mut R) -> Result<f64> {
    if n_pairs == 0 || xs.len() < 2 * n_pairs {
        return Err(Error::invalid(format!(
            "diversity with {n_pairs} pairs needs at least {} embeddings, got {}",
            2 * n_pairs.max(1),
            xs.len()
        )));
    }
    let picks: Vec<usize> = rand::seq::index::sample(rng, xs.len(), 2 * n_pairs).into_vec();
    let total: f64 = picks
        .chunks_exact(2)
        .map(|p| {
            let d = &xs[p[0]] - &xs[p[1]];
            d.dot(&d).sqrt()
        })
        .sum();
    Ok(total / n_pairs as f64)
}

/// Fraction of frames on which two tracks agree.
pub fn frame_accuracy(pred: &FrameLabelTrack, truth: &FrameLabelTrack) -> Result<f64> {
    if pred.n_frames() != truth.n_frames() || truth.n_frames() == 0 {
        return Err(Error::invalid(format!(
            "tracks cover {} and {} frames",
            pred.n_frames(),
            truth.n_frames()
        )));
    }
    let (a, b) = (pred.frame_labels(), truth.frame_labels());
    Ok(a.iter().zip(&b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64)
}

/// Mean with a normal-approximation 95% half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub half_width: f64,
}

impl Interval {
    pub fn from_samples(xs: &[f64]) -> Result<Self> {
        if xs.is_empty() {
            return Err(Error::invalid("no samples"));
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let half_width = if xs.len() > 1 {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            1.96 * (var / n).sqrt()
        } else {
            0.0
        };
        Ok(Interval { mean, half_width })
    }

    pub fn contains(&self, x: f64) -> bool {
        (x - self.mean).abs() <= self.half_width
    }
}
