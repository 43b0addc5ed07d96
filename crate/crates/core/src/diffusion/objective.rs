use ndarray::{Array1, Array2, Array3};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};

use super::schedule::{q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{Denoiser, DenoiserInput, DenoiserOutput, DenoiserWeights, ForwardCache, Real};

/// Anything that maps a noisy batch to clean-data predictions.
pub trait Denoise<F: Real> {
    fn denoise(&self, input: &DenoiserInput<F>) -> Result<DenoiserOutput<F>>;
}

/// A denoiser that can also report gradients for training.
pub trait Trainable<F: Real>: Denoise<F> {
    type Context;
    type Grad;

    fn forward_train(&self, input: &DenoiserInput<F>, rng: &mut dyn RngCore) -> Result<(DenoiserOutput<F>, Self::Context)>;

    fn backward(&self, ctx: &Self::Context, d_x: &Array3<F>, d_y: &Array3<F>) -> Self::Grad;
}

impl<F: Real> Denoise<F> for Denoiser<F> {
    fn denoise(&self, input: &DenoiserInput<F>) -> Result<DenoiserOutput<F>> {
        self.forward(input)
    }
}

impl<F: Real> Trainable<F> for Denoiser<F> {
    type Context = ForwardCache<F>;
    type Grad = DenoiserWeights<F>;

    fn forward_train(&self, input: &DenoiserInput<F>, rng: &mut dyn RngCore) -> Result<(DenoiserOutput<F>, ForwardCache<F>)> {
        self.forward_cached(input, Some(rng))
    }

    fn backward(&self, ctx: &ForwardCache<F>, d_x: &Array3<F>, d_y: &Array3<F>) -> DenoiserWeights<F> {
        Denoiser::backward(self, ctx, d_x.view(), d_y.view())
    }
}

/// Clean training data: normalized motion, scaled frame-text embeddings,
/// raw global-condition embeddings (`None` = no sentence) and the frame mask.
///
/// Items with `y_known[i] == false` carry no frame-level annotation: their text
/// is fed as pure noise at the last timestep and left out of the text loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch<F> {
    pub x0: Array3<F>,
    pub y0: Array3<F>,
    pub cond: Vec<Option<Array1<F>>>,
    pub mask: Array2<bool>,
    pub y_known: Vec<bool>,
}

impl<F: Real> TrainingBatch<F> {
    pub fn validate(&self) -> Result<()> {
        let (b, n, _) = self.x0.dim();
        let (by, ny, _) = self.y0.dim();
        if b == 0 || n == 0 {
            return Err(Error::invalid("training batch is empty"));
        }
        if (by, ny) != (b, n) || self.mask.dim() != (b, n) || self.cond.len() != b || self.y_known.len() != b {
            return Err(Error::invalid("training batch shapes are inconsistent"));
        }
        if self.mask.rows().into_iter().any(|r| !r.iter().any(|&m| m)) {
            return Err(Error::invalid("every batch item needs at least one valid frame"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.x0.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn valid_frames(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Per-modality masked mean squared error, each normalized by its own element count.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerms<F> {
    pub loss: f64,
    pub loss_x: f64,
    pub loss_y: f64,
    pub d_x: Array3<F>,
    pub d_y: Array3<F>,
}

pub fn diffusion_loss<F: Real>(pred: &DenoiserOutput<F>, batch: &TrainingBatch<F>) -> Result<LossTerms<F>> {
    if pred.x.dim() != batch.x0.dim() || pred.y.dim() != batch.y0.dim() {
        return Err(Error::invalid("prediction shapes do not match the batch"));
    }
    let term = |p: &Array3<F>, target: &Array3<F>, known: &dyn Fn(usize) -> bool| {
        let frames = batch
            .mask
            .indexed_iter()
            .filter(|&((i, _), &m)| m && known(i))
            .count();
        let mut grad = Array3::<F>::zeros(target.raw_dim());
        if frames == 0 {
            return (0.0, grad);
        }
        let count = (frames * target.dim().2) as f64;
        let mut sum = 0.0;
        let scale = F::of(2.0 / count);
        for ((i, j, k), &v) in p.indexed_iter() {
            if batch.mask[[i, j]] && known(i) {
                let r = v - target[[i, j, k]];
                sum += r.as_f64() * r.as_f64();
                grad[[i, j, k]] = scale * r;
            }
        }
        (sum / count, grad)
    };
    let (loss_x, d_x) = term(&pred.x, &batch.x0, &|_| true);
    let (loss_y, d_y) = term(&pred.y, &batch.y0, &|i| batch.y_known[i]);
    Ok(LossTerms {
        loss: loss_x + loss_y,
        loss_x,
        loss_y,
        d_x,
        d_y,
    })
}

/// Random quantities of one training step, drawn in a fixed order per batch
/// item: `t_x`, `t_y`, the dropout coin, then the two noise tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDraws<F> {
    pub t_x: Vec<usize>,
    pub t_y: Vec<usize>,
    pub dropped: Vec<bool>,
    pub eps_x: Array3<F>,
    pub eps_y: Array3<F>,
}

pub fn draw_step<F: Real, R: Rng + ?Sized>(
    batch: &TrainingBatch<F>,
    schedule: &NoiseSchedule,
    rng: &mut R,
    p_drop: f64,
) -> StepDraws<F> {
    let (b, n, dx) = batch.x0.dim();
    let dy = batch.y0.dim().2;
    let big_t = schedule.steps();
    let mut t_x = Vec::with_capacity(b);
    let mut t_y = Vec::with_capacity(b);
    let mut dropped = Vec::with_capacity(b);
    let mut eps_x = Array3::<F>::zeros((b, n, dx));
    let mut eps_y = Array3::<F>::zeros((b, n, dy));
    for i in 0..b {
        t_x.push(rng.gen_range(1..=big_t));
        let ty = rng.gen_range(1..=big_t);
        t_y.push(if batch.y_known[i] { ty } else { big_t });
        dropped.push(rng.gen::<f64>() < p_drop);
        for v in eps_x.slice_mut(ndarray::s![i, .., ..]).iter_mut() {
            *v = F::of(StandardNormal.sample(rng));
        }
        for v in eps_y.slice_mut(ndarray::s![i, .., ..]).iter_mut() {
            *v = F::of(StandardNormal.sample(rng));
        }
    }
    StepDraws {
        t_x,
        t_y,
        dropped,
        eps_x,
        eps_y,
    }
}

#[derive(Debug)]
pub struct StepOutput<G> {
    pub loss: f64,
    pub loss_x: f64,
    pub loss_y: f64,
    pub t_x: Vec<usize>,
    pub t_y: Vec<usize>,
    /// How many batch items had their condition replaced by the null condition.
    pub dropped: usize,
    pub grad: G,
}

/// One step of the joint objective: independent timesteps per modality,
/// condition dropout with probability `p_drop`, noise both modalities and
/// regress the clean data.
pub fn training_step<F: Real, M: Trainable<F>>(
    batch: &TrainingBatch<F>,
    model: &M,
    schedule: &NoiseSchedule,
    rng: &mut dyn RngCore,
    p_drop: f64,
) -> Result<StepOutput<M::Grad>> {
    batch.validate()?;
    if !(0.0..=1.0).contains(&p_drop) {
        return Err(Error::invalid(format!("p_drop {p_drop} must lie in [0, 1]")));
    }
    let draws = draw_step(batch, schedule, rng, p_drop);
    let b = batch.len();
    let mut x_t = Array3::<F>::zeros(batch.x0.raw_dim());
    let mut y_t = Array3::<F>::zeros(batch.y0.raw_dim());
    for i in 0..b {
        let sx = q_sample(
            &batch.x0.slice(ndarray::s![i, .., ..]),
            draws.t_x[i],
            &draws.eps_x.slice(ndarray::s![i, .., ..]),
            schedule,
        )?;
        x_t.slice_mut(ndarray::s![i, .., ..]).assign(&sx);
        let sy = q_sample(
            &batch.y0.slice(ndarray::s![i, .., ..]),
            draws.t_y[i],
            &draws.eps_y.slice(ndarray::s![i, .., ..]),
            schedule,
        )?;
        y_t.slice_mut(ndarray::s![i, .., ..]).assign(&sy);
    }
    let cond: Vec<Option<Array1<F>>> = batch
        .cond
        .iter()
        .zip(&draws.dropped)
        .map(|(c, &d)| if d { None } else { c.clone() })
        .collect();
    let input = DenoiserInput {
        x: x_t.view(),
        y: y_t.view(),
        t_x: &draws.t_x,
        t_y: &draws.t_y,
        cond: &cond,
        mask: batch.mask.view(),
    };
    let (pred, ctx) = model.forward_train(&input, rng)?;
    let terms = diffusion_loss(&pred, batch)?;
    if !terms.loss.is_finite() {
        return Err(Error::Numerical(format!("training loss is {}", terms.loss)));
    }
    let grad = model.backward(&ctx, &terms.d_x, &terms.d_y);
    Ok(StepOutput {
        loss: terms.loss,
        loss_x: terms.loss_x,
        loss_y: terms.loss_y,
        t_x: draws.t_x,
        t_y: draws.t_y,
        dropped: draws.dropped.iter().filter(|&&d| d).count(),
        grad,
    })
}

/// Guided prediction `uncond + s · (cond − uncond)`.
pub fn cfg_combine<F: Real>(pred_cond: &Array3<F>, pred_uncond: &Array3<F>, s: f64) -> Result<Array3<F>> {
    if pred_cond.dim() != pred_uncond.dim() {
        return Err(Error::invalid("guidance needs equally shaped predictions"));
    }
    if !(s >= 0.0 && s.is_finite()) {
        return Err(Error::invalid(format!("guidance scale {s} must be a finite non-negative number")));
    }
    if s == 1.0 {
        return Ok(pred_cond.clone());
    }
    if s == 0.0 {
        return Ok(pred_uncond.clone());
    }
    let s = F::of(s);
    let mut out = pred_uncond.clone();
    out.zip_mut_with(pred_cond, |u, &c| *u = *u + s * (c - *u));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::{make_schedule, ScheduleKind};
    use crate::nn::DenoiserConfig;
    use ndarray::{s, Array};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixed {
        x: Array3<f64>,
        y: Array3<f64>,
    }

    impl Denoise<f64> for Fixed {
        fn denoise(&self, _: &DenoiserInput<f64>) -> Result<DenoiserOutput<f64>> {
            Ok(DenoiserOutput {
                x: self.x.clone(),
                y: self.y.clone(),
            })
        }
    }

    impl Trainable<f64> for Fixed {
        type Context = ();
        type Grad = (Array3<f64>, Array3<f64>);

        fn forward_train(&self, input: &DenoiserInput<f64>, _: &mut dyn rand::RngCore) -> Result<(DenoiserOutput<f64>, ())> {
            Ok((self.denoise(input)?, ()))
        }

        fn backward(&self, _: &(), d_x: &Array3<f64>, d_y: &Array3<f64>) -> Self::Grad {
            (d_x.clone(), d_y.clone())
        }
    }

    fn gaussian_batch(b: usize, n: usize, dx: usize, dy: usize, seed: u64) -> TrainingBatch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = |shape: (usize, usize, usize)| Array::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng));
        let x0 = g((b, n, dx));
        let y0 = g((b, n, dy)) * 0.4;
        let mut mask = Array2::from_elem((b, n), true);
        for i in 0..b {
            let valid = 1 + (i * 7) % n;
            mask.slice_mut(s![i, valid..]).fill(false);
        }
        TrainingBatch {
            x0,
            y0,
            cond: vec![None; b],
            mask,
            y_known: vec![true; b],
        }
    }

    #[test]
    fn oracle_stub_has_zero_loss() {
        let batch = gaussian_batch(4, 8, 3, 5, 1);
        let stub = Fixed {
            x: batch.x0.clone(),
            y: batch.y0.clone(),
        };
        let sched = make_schedule(ScheduleKind::Cosine, 100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = training_step(&batch, &stub, &sched, &mut rng, 0.1).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.0.iter().chain(out.grad.1.iter()).all(|&g| g == 0.0));
    }

    #[test]
    fn unknown_text_is_noise_and_unweighted() {
        let mut batch = gaussian_batch(3, 5, 2, 3, 8);
        batch.y_known = vec![true, false, true];
        let sched = make_schedule(ScheduleKind::Cosine, 30).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = draw_step(&batch, &sched, &mut rng, 0.1);
        assert_eq!(d.t_y[1], 30);
        let mut pred = DenoiserOutput {
            x: batch.x0.clone(),
            y: batch.y0.clone(),
        };
        pred.y.slice_mut(s![1, .., ..]).fill(100.0);
        let l = diffusion_loss(&pred, &batch).unwrap();
        assert_eq!(l.loss, 0.0);
        batch.y_known = vec![false; 3];
        let l = diffusion_loss(&pred, &batch).unwrap();
        assert_eq!(l.loss_y, 0.0);
    }

    #[test]
    fn zero_stub_loss_is_second_moment() {
        let batch = gaussian_batch(256, 16, 6, 10, 3);
        let stub = Fixed {
            x: Array3::zeros(batch.x0.raw_dim()),
            y: Array3::zeros(batch.y0.raw_dim()),
        };
        let sched = make_schedule(ScheduleKind::Cosine, 1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = training_step(&batch, &stub, &sched, &mut rng, 0.1).unwrap();
        let mut norms = 0.0;
        let mut frames = 0.0;
        for ((i, j), &m) in batch.mask.indexed_iter() {
            if m {
                norms += batch.y0.slice(s![i, j, ..]).iter().map(|v| v * v).sum::<f64>();
                frames += 1.0;
            }
        }
        let want = 1.0 + norms / (frames * 10.0);
        assert!((out.loss / want - 1.0).abs() < 0.03, "{} vs {want}", out.loss);
    }

    #[test]
    fn timesteps_are_uniform_and_independent() {
        let big_t = 1000;
        let sched = make_schedule(ScheduleKind::Cosine, big_t).unwrap();
        let batch = gaussian_batch(1, 1, 1, 1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 100_000;
        let mut counts = vec![0usize; big_t];
        let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..draws {
            let d = draw_step(&batch, &sched, &mut rng, 0.1);
            let (tx, ty) = (d.t_x[0], d.t_y[0]);
            assert!((1..=big_t).contains(&tx) && (1..=big_t).contains(&ty));
            counts[tx - 1] += 1;
            let (a, b) = (tx as f64, ty as f64);
            sx += a;
            sy += b;
            sxx += a * a;
            syy += b * b;
            sxy += a * b;
        }
        let expected = draws as f64 / big_t as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // Wilson-Hilferty normal approximation of the chi-square upper tail.
        let k = (big_t - 1) as f64;
        let z = ((chi2 / k).powf(1.0 / 3.0) - (1.0 - 2.0 / (9.0 * k))) / (2.0 / (9.0 * k)).sqrt();
        assert!(z < 2.326, "chi-square {chi2} too large (z = {z})");
        let n = draws as f64;
        let cov = sxy / n - sx / n * sy / n;
        let rho = cov / ((sxx / n - (sx / n).powi(2)) * (syy / n - (sy / n).powi(2))).sqrt();
        assert!(rho.abs() < 0.02, "correlation {rho}");
    }

    #[test]
    fn dropout_rate_matches_probability() {
        let sched = make_schedule(ScheduleKind::Cosine, 10).unwrap();
        let batch = gaussian_batch(50, 1, 1, 1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut dropped = 0;
        for _ in 0..400 {
            dropped += draw_step(&batch, &sched, &mut rng, 0.1).dropped.iter().filter(|&&d| d).count();
        }
        let rate = dropped as f64 / 20_000.0;
        assert!((rate - 0.1).abs() < 0.01, "{rate}");
    }

    #[test]
    fn guidance_combination() {
        let c = Array::from_shape_fn((2, 3, 2), |(i, j, k)| (i + 2 * j) as f64 - k as f64 * 0.5);
        let u = Array::from_shape_fn((2, 3, 2), |(i, j, k)| (i * j) as f64 + k as f64);
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
        assert_eq!(cfg_combine(&c, &u, 2.0).unwrap(), &c * 2.0 - &u);
        assert_eq!(cfg_combine(&c, &c, 3.7).unwrap(), c);
        assert!(cfg_combine(&c, &u, -1.0).is_err());
        assert!(cfg_combine(&c, &Array3::zeros((2, 3, 1)), 2.0).is_err());
    }

    #[test]
    fn padded_frames_change_neither_loss_nor_gradient() {
        let cfg = DenoiserConfig {
            model_dim: 8,
            layers: 1,
            heads: 2,
            ff_dim: 16,
            max_frames: 6,
            motion_dim: 3,
            text_dim: 4,
            cond_dim: 5,
            dropout: 0.1,
            max_timestep: 50,
        };
        let model = Denoiser::<f64>::new(cfg, 9).unwrap();
        // Non-zero heads so the output depends on the input.
        let mut model = model;
        for (_, mut t) in model.weights.tensors_mut() {
            if t.iter().all(|&v| v == 0.0) {
                t.mapv_inplace(|_| 0.05);
            }
        }
        let sched = make_schedule(ScheduleKind::Cosine, 50).unwrap();
        let mut batch = gaussian_batch(3, 6, 3, 4, 21);
        batch.cond = vec![Some(Array1::from_elem(5, 0.3)), None, Some(Array1::from_elem(5, -1.0))];
        let run = |b: &TrainingBatch<f64>| {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            training_step(b, &model, &sched, &mut rng, 0.3).unwrap()
        };
        let base = run(&batch);
        let mut perturbed = batch.clone();
        for ((i, j), &m) in batch.mask.indexed_iter() {
            if !m {
                perturbed.x0.slice_mut(s![i, j, ..]).fill(1e3);
                perturbed.y0.slice_mut(s![i, j, ..]).fill(-7.0);
            }
        }
        let other = run(&perturbed);
        assert_eq!(base.loss, other.loss);
        for ((_, a), (_, b)) in base.grad.tensors().into_iter().zip(other.grad.tensors()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn non_finite_targets_are_numerical_errors() {
        let mut batch = gaussian_batch(2, 3, 2, 2, 5);
        batch.x0[[0, 0, 0]] = f64::NAN;
        let stub = Fixed {
            x: Array3::zeros(batch.x0.raw_dim()),
            y: Array3::zeros(batch.y0.raw_dim()),
        };
        let sched = make_schedule(ScheduleKind::Cosine, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = training_step(&batch, &stub, &sched, &mut rng, 0.1).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    proptest! {
        #[test]
        fn loss_is_nonnegative_and_zero_only_at_targets(
            seed in 0u64..1000,
            offset in -2.0f64..2.0,
            frame in 0usize..4,
        ) {
            let batch = gaussian_batch(2, 4, 2, 3, seed);
            let mut pred = DenoiserOutput { x: batch.x0.clone(), y: batch.y0.clone() };
            // Garbage in padded frames never counts.
            for ((i, j), &m) in batch.mask.indexed_iter() {
                if !m {
                    pred.x.slice_mut(s![i, j, ..]).fill(9.0);
                }
            }
            let exact = diffusion_loss(&pred, &batch).unwrap();
            prop_assert_eq!(exact.loss, 0.0);
            pred.y[[0, frame, 1]] += offset;
            let l = diffusion_loss(&pred, &batch).unwrap();
            prop_assert!(l.loss >= 0.0);
            let counted = batch.mask[[0, frame]] && offset != 0.0;
            prop_assert_eq!(l.loss > 0.0, counted);
        }
    }
}
