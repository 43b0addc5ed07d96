//! Primitive layers with explicit backward passes.
//!
//! Activations are row-major `rows x features` matrices; batch and sequence
//! positions are flattened into rows by the caller.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Scalar types the network runs in.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + std::fmt::Debug
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite scalar")
    }

    /// `exp` used by activations and softmax; may trade the last ulps for speed.
    fn exp_fast(self) -> Self {
        self.exp()
    }
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> f32 {
        v as f32
    }

    #[inline]
    fn exp_fast(self) -> f32 {
        exp_f32(self)
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> f64 {
        v
    }
}

/// Range-reduced polynomial exp, relative error below 2e-7 on the clamped range.
#[inline]
pub fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    // Adding 1.5 * 2^23 leaves round(x / ln 2) in the low mantissa bits.
    const SHIFT: f32 = 12_582_912.0;
    let x = x.max(-87.0).min(88.0);
    let shifted = x * LOG2E + SHIFT;
    let k = shifted - SHIFT;
    let r = x - k * LN2_HI - k * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (0.166_666_67 + r * (0.041_666_668 + r * (0.008_333_334 + r * (0.001_388_889 + r * 0.000_198_412_7))))));
    let scale = shifted.to_bits().wrapping_sub(SHIFT.to_bits()).wrapping_add(127) << 23;
    f32::from_bits(scale) * p
}

/// Sum with eight independent accumulators so the loop vectorizes.
#[inline]
pub fn sum_lanes<F: Real>(xs: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let mut chunks = xs.chunks_exact(8);
    for c in &mut chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a += v;
        }
    }
    let mut total = F::zero();
    for v in chunks.remainder() {
        total += *v;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + total
}

/// Dot product with eight independent accumulators.
#[inline]
pub fn dot_lanes<F: Real>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut total = F::zero();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        total += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + total
}

#[inline]
pub fn max_lanes<F: Real>(xs: &[F]) -> F {
    let mut acc = [F::neg_infinity(); 8];
    let mut chunks = xs.chunks_exact(8);
    for c in &mut chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a = if v > *a { v } else { *a };
        }
    }
    let mut m = F::neg_infinity();
    for &v in acc.iter().chain(chunks.remainder()) {
        m = if v > m { v } else { m };
    }
    m
}

/// In-place softmax of one row.
#[inline]
pub fn softmax_row<F: Real>(row: &mut [F]) {
    let max = max_lanes(row);
    for x in row.iter_mut() {
        *x = (*x - max).exp_fast();
    }
    let inv = F::one() / sum_lanes(row);
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// `y = x · W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Real> Linear<F> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    /// Gaussian weights with standard deviation `std`, zero bias.
    pub fn gaussian<R: Rng>(fan_in: usize, fan_out: usize, std: f64, rng: &mut R) -> Self {
        let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || {
            let z: f64 = StandardNormal.sample(rng);
            F::of(z * std)
        });
        Linear {
            weight,
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<F>) -> Array2<F> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<F>, dy: ArrayView2<F>, grad: &mut Linear<F>) -> Array2<F> {
        self.accumulate(x, dy, grad);
        dy.dot(&self.weight.t())
    }

    /// Parameter gradients only.
    pub fn accumulate(&self, x: ArrayView2<F>, dy: ArrayView2<F>, grad: &mut Linear<F>) {
        ndarray::linalg::general_mat_mul(F::one(), &x.t(), &dy, F::one(), &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<F> {
    pub gain: Array1<F>,
    pub bias: Array1<F>,
}

pub const LN_EPS: f64 = 1e-5;

/// Saved normalized activations and inverse standard deviations.
#[derive(Debug)]
pub struct LayerNormCache<F> {
    pub xhat: Array2<F>,
    pub rstd: Array1<F>,
}

impl<F: Real> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: Array1::ones(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        LayerNorm {
            gain: Array1::zeros(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: ArrayView2<F>) -> (Array2<F>, LayerNormCache<F>) {
        let (rows, dim) = x.dim();
        let d = F::of(dim as f64);
        let eps = F::of(LN_EPS);
        let mut xhat = x.as_standard_layout().into_owned();
        let mut y = Array2::<F>::zeros((rows, dim));
        let mut rstd = Array1::<F>::zeros(rows);
        let gain = self.gain.as_slice().expect("contiguous gain");
        let bias = self.bias.as_slice().expect("contiguous bias");
        let xs = xhat.as_slice_mut().expect("standard layout");
        let ys = y.as_slice_mut().expect("standard layout");
        for ((row, out), r) in xs.chunks_exact_mut(dim).zip(ys.chunks_exact_mut(dim)).zip(rstd.iter_mut()) {
            let mean = sum_lanes(row) / d;
            for v in row.iter_mut() {
                *v -= mean;
            }
            let var = dot_lanes(row, row) / d;
            let s = F::one() / (var + eps).sqrt();
            for (((v, o), &g), &b) in row.iter_mut().zip(out.iter_mut()).zip(gain).zip(bias) {
                *v *= s;
                *o = *v * g + b;
            }
            *r = s;
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LayerNormCache<F>, dy: ArrayView2<F>, grad: &mut LayerNorm<F>) -> Array2<F> {
        let (rows, dim) = dy.dim();
        let d = F::of(dim as f64);
        let dy = dy.as_standard_layout();
        let mut dx = Array2::<F>::zeros((rows, dim));
        let gain = self.gain.as_slice().expect("contiguous gain");
        let gg = grad.gain.as_slice_mut().expect("contiguous gain");
        let gb = grad.bias.as_slice_mut().expect("contiguous bias");
        let dys = dy.as_slice().expect("standard layout");
        let xhs = cache.xhat.as_slice().expect("standard layout");
        let dxs = dx.as_slice_mut().expect("standard layout");
        let mut tmp = vec![F::zero(); dim];
        for (((dyr, xh), dxr), &s) in dys
            .chunks_exact(dim)
            .zip(xhs.chunks_exact(dim))
            .zip(dxs.chunks_exact_mut(dim))
            .zip(cache.rstd.iter())
        {
            for j in 0..dim {
                gg[j] += dyr[j] * xh[j];
                gb[j] += dyr[j];
                tmp[j] = dyr[j] * gain[j];
            }
            let mean_d = sum_lanes(&tmp) / d;
            let mean_dx = dot_lanes(&tmp, xh) / d;
            for j in 0..dim {
                dxr[j] = s * (tmp[j] - mean_d - xh[j] * mean_dx);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

#[inline]
fn fast_tanh<F: Real>(u: F) -> F {
    let lim = F::of(19.0);
    let e = (F::of(2.0) * u.max(-lim).min(lim)).exp_fast();
    (e - F::one()) / (e + F::one())
}

/// Tanh-approximated GELU. Returns the activation and the inner tanh, which
/// [`gelu_grad`] reuses.
#[inline]
pub fn gelu<F: Real>(x: F) -> (F, F) {
    let c = F::of(GELU_C);
    let k = F::of(GELU_K);
    let t = fast_tanh(c * (x + k * x * x * x));
    (F::of(0.5) * x * (F::one() + t), t)
}

#[inline]
pub fn gelu_grad<F: Real>(x: F, t: F) -> F {
    let c = F::of(GELU_C);
    let k = F::of(GELU_K);
    let half = F::of(0.5);
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * k * x * x)
}

#[inline]
pub fn silu<F: Real>(x: F) -> F {
    x / (F::one() + (-x).exp_fast())
}

#[inline]
pub fn silu_grad<F: Real>(x: F) -> F {
    let s = F::one() / (F::one() + (-x).exp_fast());
    s * (F::one() + x * (F::one() - s))
}

/// Sinusoidal features of an integer timestep: `dim/2` sines then `dim/2` cosines
/// over geometrically spaced frequencies (max period 10000).
pub fn timestep_embedding(t: usize, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::<f64>::zeros(dim);
    for k in 0..half {
        let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    out
}
