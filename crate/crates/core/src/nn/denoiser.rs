use ndarray::{linalg::general_mat_mul, s, Array1, Array2, Array3, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMutD};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::layers::{
    dot_lanes, gelu, gelu_grad, silu, silu_grad, softmax_row, timestep_embedding, LayerNorm, LayerNormCache, Linear, Real,
};
use crate::error::{Error, Result};

/// Number of prefix tokens ahead of the frame tokens: `t_x`, `t_y`, condition.
pub const PREFIX_TOKENS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_frames: usize,
    /// Width of a motion frame (`D_x`).
    pub motion_dim: usize,
    /// Width of a compressed frame-text embedding (`d_e`).
    pub text_dim: usize,
    /// Width of the raw global-condition embedding.
    pub cond_dim: usize,
    pub dropout: f64,
    /// Largest timestep the model accepts.
    pub max_timestep: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            model_dim: 64,
            layers: 3,
            heads: 4,
            ff_dim: 256,
            max_frames: 64,
            motion_dim: crate::data::feature::DIM,
            text_dim: 50,
            cond_dim: crate::codec::encoder::DEFAULT_RAW_DIM,
            dropout: 0.1,
            max_timestep: 1000,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("model_dim", self.model_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("max_frames", self.max_frames),
            ("motion_dim", self.motion_dim),
            ("text_dim", self.text_dim),
            ("cond_dim", self.cond_dim),
            ("max_timestep", self.max_timestep),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::invalid(format!("denoiser {name} must be positive")));
            }
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.model_dim % 2 != 0 {
            return Err(Error::invalid("model_dim must be even for sinusoidal timestep features"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} must lie in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Closed-form parameter count of [`DenoiserWeights`] under this config.
    pub fn parameter_count(&self) -> usize {
        let d = self.model_dim;
        let linear = |i: usize, o: usize| i * o + o;
        let block = 2 * 2 * d + linear(d, 3 * d) + linear(d, d) + linear(d, self.ff_dim) + linear(self.ff_dim, d);
        linear(self.motion_dim + self.text_dim, d)
            + 2 * (linear(d, d) + linear(d, d))
            + linear(self.cond_dim, d)
            + d
            + (self.max_frames + PREFIX_TOKENS) * d
            + self.layers * block
            + 2 * d
            + linear(d, self.motion_dim)
            + linear(d, self.text_dim)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeMlp<F> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<F> {
    pub ln_attn: LayerNorm<F>,
    pub qkv: Linear<F>,
    pub attn_out: Linear<F>,
    pub ln_ff: LayerNorm<F>,
    pub ff_in: Linear<F>,
    pub ff_out: Linear<F>,
}

/// All trainable tensors of the denoiser. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserWeights<F> {
    pub input: Linear<F>,
    pub time_x: TimeMlp<F>,
    pub time_y: TimeMlp<F>,
    pub cond: Linear<F>,
    pub null_cond: Array1<F>,
    pub pos: Array2<F>,
    pub blocks: Vec<Block<F>>,
    pub final_ln: LayerNorm<F>,
    pub head_x: Linear<F>,
    pub head_y: Linear<F>,
}

fn push_linear<'a, F>(out: &mut Vec<(String, ArrayViewD<'a, F>)>, name: &str, l: &'a Linear<F>) {
    out.push((format!("{name}.weight"), l.weight.view().into_dyn()));
    out.push((format!("{name}.bias"), l.bias.view().into_dyn()));
}

fn push_linear_mut<'a, F>(out: &mut Vec<(String, ArrayViewMutD<'a, F>)>, name: &str, l: &'a mut Linear<F>) {
    out.push((format!("{name}.weight"), l.weight.view_mut().into_dyn()));
    out.push((format!("{name}.bias"), l.bias.view_mut().into_dyn()));
}

fn push_ln<'a, F>(out: &mut Vec<(String, ArrayViewD<'a, F>)>, name: &str, l: &'a LayerNorm<F>) {
    out.push((format!("{name}.gain"), l.gain.view().into_dyn()));
    out.push((format!("{name}.bias"), l.bias.view().into_dyn()));
}

fn push_ln_mut<'a, F>(out: &mut Vec<(String, ArrayViewMutD<'a, F>)>, name: &str, l: &'a mut LayerNorm<F>) {
    out.push((format!("{name}.gain"), l.gain.view_mut().into_dyn()));
    out.push((format!("{name}.bias"), l.bias.view_mut().into_dyn()));
}

impl<F: Real> DenoiserWeights<F> {
    /// Zero tensors shaped for `config`.
    pub fn zeros(config: &DenoiserConfig) -> Self {
        let d = config.model_dim;
        let mlp = || TimeMlp {
            fc1: Linear::zeros(d, d),
            fc2: Linear::zeros(d, d),
        };
        DenoiserWeights {
            input: Linear::zeros(config.motion_dim + config.text_dim, d),
            time_x: mlp(),
            time_y: mlp(),
            cond: Linear::zeros(config.cond_dim, d),
            null_cond: Array1::zeros(d),
            pos: Array2::zeros((config.max_frames + PREFIX_TOKENS, d)),
            blocks: (0..config.layers)
                .map(|_| Block {
                    ln_attn: LayerNorm::zeros(d),
                    qkv: Linear::zeros(d, 3 * d),
                    attn_out: Linear::zeros(d, d),
                    ln_ff: LayerNorm::zeros(d),
                    ff_in: Linear::zeros(d, config.ff_dim),
                    ff_out: Linear::zeros(config.ff_dim, d),
                })
                .collect(),
            final_ln: LayerNorm::zeros(d),
            head_x: Linear::zeros(d, config.motion_dim),
            head_y: Linear::zeros(d, config.text_dim),
        }
    }

    /// Named views of every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out = Vec::new();
        push_linear(&mut out, "input", &self.input);
        push_linear(&mut out, "time_x.fc1", &self.time_x.fc1);
        push_linear(&mut out, "time_x.fc2", &self.time_x.fc2);
        push_linear(&mut out, "time_y.fc1", &self.time_y.fc1);
        push_linear(&mut out, "time_y.fc2", &self.time_y.fc2);
        push_linear(&mut out, "cond", &self.cond);
        out.push(("null_cond".into(), self.null_cond.view().into_dyn()));
        out.push(("pos".into(), self.pos.view().into_dyn()));
        for (i, b) in self.blocks.iter().enumerate() {
            push_ln(&mut out, &format!("blocks.{i}.ln_attn"), &b.ln_attn);
            push_linear(&mut out, &format!("blocks.{i}.qkv"), &b.qkv);
            push_linear(&mut out, &format!("blocks.{i}.attn_out"), &b.attn_out);
            push_ln(&mut out, &format!("blocks.{i}.ln_ff"), &b.ln_ff);
            push_linear(&mut out, &format!("blocks.{i}.ff_in"), &b.ff_in);
            push_linear(&mut out, &format!("blocks.{i}.ff_out"), &b.ff_out);
        }
        push_ln(&mut out, "final_ln", &self.final_ln);
        push_linear(&mut out, "head_x", &self.head_x);
        push_linear(&mut out, "head_y", &self.head_y);
        out
    }

    /// Mutable counterpart of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        let mut out = Vec::new();
        push_linear_mut(&mut out, "input", &mut self.input);
        push_linear_mut(&mut out, "time_x.fc1", &mut self.time_x.fc1);
        push_linear_mut(&mut out, "time_x.fc2", &mut self.time_x.fc2);
        push_linear_mut(&mut out, "time_y.fc1", &mut self.time_y.fc1);
        push_linear_mut(&mut out, "time_y.fc2", &mut self.time_y.fc2);
        push_linear_mut(&mut out, "cond", &mut self.cond);
        out.push(("null_cond".into(), self.null_cond.view_mut().into_dyn()));
        out.push(("pos".into(), self.pos.view_mut().into_dyn()));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            push_ln_mut(&mut out, &format!("blocks.{i}.ln_attn"), &mut b.ln_attn);
            push_linear_mut(&mut out, &format!("blocks.{i}.qkv"), &mut b.qkv);
            push_linear_mut(&mut out, &format!("blocks.{i}.attn_out"), &mut b.attn_out);
            push_ln_mut(&mut out, &format!("blocks.{i}.ln_ff"), &mut b.ln_ff);
            push_linear_mut(&mut out, &format!("blocks.{i}.ff_in"), &mut b.ff_in);
            push_linear_mut(&mut out, &format!("blocks.{i}.ff_out"), &mut b.ff_out);
        }
        push_ln_mut(&mut out, "final_ln", &mut self.final_ln);
        push_linear_mut(&mut out, "head_x", &mut self.head_x);
        push_linear_mut(&mut out, "head_y", &mut self.head_y);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Converts every tensor to another scalar type.
    pub fn cast<G: Real>(&self, config: &DenoiserConfig) -> DenoiserWeights<G> {
        let mut out = DenoiserWeights::<G>::zeros(config);
        for ((_, src), (_, mut dst)) in self.tensors().into_iter().zip(out.tensors_mut()) {
            dst.zip_mut_with(&src, |d, &s| *d = G::of(s.as_f64()));
        }
        out
    }
}

/// Deterministic initialization; both output heads start at zero.
pub fn init_weights<F: Real>(config: &DenoiserConfig, seed: u64) -> Result<DenoiserWeights<F>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.model_dim;
    let inv = |n: usize| 1.0 / (n as f64).sqrt();
    let depth = 1.0 / (2.0 * config.layers as f64).sqrt();
    let mut w = DenoiserWeights::zeros(config);
    w.input = Linear::gaussian(config.motion_dim + config.text_dim, d, inv(config.motion_dim + config.text_dim), &mut rng);
    for mlp in [&mut w.time_x, &mut w.time_y] {
        mlp.fc1 = Linear::gaussian(d, d, inv(d), &mut rng);
        mlp.fc2 = Linear::gaussian(d, d, inv(d), &mut rng);
    }
    // Raw condition embeddings are unit vectors, so unit-variance weights give
    // unit-variance projections.
    w.cond = Linear::gaussian(config.cond_dim, d, 1.0, &mut rng);
    w.null_cond = Array1::from_shape_simple_fn(d, || {
        let z: f64 = StandardNormal.sample(&mut rng);
        F::of(z)
    });
    for (j, mut row) in w.pos.rows_mut().into_iter().enumerate() {
        let e = timestep_embedding(j, d);
        row.zip_mut_with(&e, |p, &v| *p = F::of(v));
    }
    for b in w.blocks.iter_mut() {
        b.ln_attn = LayerNorm::new(d);
        b.qkv = Linear::gaussian(d, 3 * d, inv(d), &mut rng);
        b.attn_out = Linear::gaussian(d, d, inv(d) * depth, &mut rng);
        b.ln_ff = LayerNorm::new(d);
        b.ff_in = Linear::gaussian(d, config.ff_dim, inv(d), &mut rng);
        b.ff_out = Linear::gaussian(config.ff_dim, d, inv(config.ff_dim) * depth, &mut rng);
    }
    w.final_ln = LayerNorm::new(d);
    Ok(w)
}

/// One batch of denoiser inputs. `cond` holds raw condition embeddings, `None` for the null condition.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserInput<'a, F> {
    pub x: ArrayView3<'a, F>,
    pub y: ArrayView3<'a, F>,
    pub t_x: &'a [usize],
    pub t_y: &'a [usize],
    pub cond: &'a [Option<Array1<F>>],
    pub mask: ArrayView2<'a, bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput<F> {
    pub x: Array3<F>,
    pub y: Array3<F>,
}

struct BlockCache<F> {
    ln_attn: LayerNormCache<F>,
    z_attn: Array2<F>,
    qkv: Array2<F>,
    probs: Vec<Array2<F>>,
    attn: Array2<F>,
    drop_attn: Option<Array2<F>>,
    ln_ff: LayerNormCache<F>,
    z_ff: Array2<F>,
    pre_act: Array2<F>,
    act: Array2<F>,
    act_tanh: Array2<F>,
    drop_ff: Option<Array2<F>>,
}

/// Activations saved by a training forward pass.
///
/// Only valid tokens are kept: each batch item occupies a contiguous run of
/// rows (three prefix tokens, then its unmasked frames in order).
pub struct ForwardCache<F> {
    batch: usize,
    frames: usize,
    spans: Vec<(usize, usize)>,
    valid: Vec<Vec<usize>>,
    tokens: Array2<F>,
    tx_feat: Array2<F>,
    tx_pre: Array2<F>,
    tx_hidden: Array2<F>,
    ty_feat: Array2<F>,
    ty_pre: Array2<F>,
    ty_hidden: Array2<F>,
    cond_in: Array2<F>,
    cond_null: Vec<bool>,
    blocks: Vec<BlockCache<F>>,
    final_ln: LayerNormCache<F>,
    frame_out: Array2<F>,
}

/// The transformer denoiser: weights plus their configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser<F = f32> {
    pub config: DenoiserConfig,
    pub weights: DenoiserWeights<F>,
}

fn dropout_mask<F: Real>(rows: usize, cols: usize, p: f64, rng: &mut dyn RngCore) -> Array2<F> {
    let keep = F::of(1.0 / (1.0 - p));
    let threshold = (p * 4_294_967_296.0) as u64;
    let mut bits = vec![0u32; rows * cols];
    rng.fill(&mut bits[..]);
    let data = bits.into_iter().map(|b| if (b as u64) < threshold { F::zero() } else { keep }).collect();
    Array2::from_shape_vec((rows, cols), data).expect("mask shape")
}

impl<F: Real> Denoiser<F> {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let weights = init_weights(&config, seed)?;
        Ok(Denoiser { config, weights })
    }

    fn check(&self, input: &DenoiserInput<F>) -> Result<(usize, usize)> {
        let c = &self.config;
        let (b, n, dx) = input.x.dim();
        let (by, ny, dy) = input.y.dim();
        if b == 0 || n == 0 {
            return Err(Error::invalid("denoiser batch must be non-empty"));
        }
        if (by, ny) != (b, n) || dx != c.motion_dim || dy != c.text_dim {
            return Err(Error::invalid(format!(
                "denoiser expects x (B,N,{}) and y (B,N,{}); got {:?} and {:?}",
                c.motion_dim,
                c.text_dim,
                input.x.dim(),
                input.y.dim()
            )));
        }
        if n > c.max_frames {
            return Err(Error::invalid(format!("{n} frames exceed max_frames {}", c.max_frames)));
        }
        if input.t_x.len() != b || input.t_y.len() != b || input.cond.len() != b || input.mask.dim() != (b, n) {
            return Err(Error::invalid("timesteps, conditions and mask must match the batch"));
        }
        if let Some(t) = input.t_x.iter().chain(input.t_y).find(|&&t| t > c.max_timestep) {
            return Err(Error::invalid(format!("timestep {t} exceeds {}", c.max_timestep)));
        }
        for (i, row) in input.mask.rows().into_iter().enumerate() {
            if !row.iter().any(|&m| m) {
                return Err(Error::invalid(format!("batch item {i} has no valid frame")));
            }
        }
        for cnd in input.cond.iter().flatten() {
            if cnd.len() != c.cond_dim {
                return Err(Error::invalid(format!(
                    "condition embedding has {} entries, expected {}",
                    cnd.len(),
                    c.cond_dim
                )));
            }
        }
        Ok((b, n))
    }

    /// Inference forward pass (no dropout).
    pub fn forward(&self, input: &DenoiserInput<F>) -> Result<DenoiserOutput<F>> {
        Ok(self.forward_cached(input, None)?.0)
    }

    /// Forward pass that keeps activations for [`backward`](Self::backward).
    /// Dropout is active when `rng` is given and the configured rate is positive.
    /// Outputs at masked frames are zero.
    pub fn forward_cached(
        &self,
        input: &DenoiserInput<F>,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<(DenoiserOutput<F>, ForwardCache<F>)> {
        let (b, n) = self.check(input)?;
        let c = &self.config;
        let w = &self.weights;
        let d = c.model_dim;

        let valid: Vec<Vec<usize>> = input
            .mask
            .rows()
            .into_iter()
            .map(|row| row.iter().enumerate().filter(|(_, &m)| m).map(|(j, _)| j).collect())
            .collect();
        let mut spans = Vec::with_capacity(b);
        let mut rows = 0;
        for v in &valid {
            spans.push((rows, PREFIX_TOKENS + v.len()));
            rows += PREFIX_TOKENS + v.len();
        }
        let n_tokens = rows - PREFIX_TOKENS * b;

        let mut tokens = Array2::<F>::zeros((n_tokens, c.motion_dim + c.text_dim));
        let mut r = 0;
        for (bi, v) in valid.iter().enumerate() {
            for &j in v {
                let mut row = tokens.row_mut(r);
                row.slice_mut(s![..c.motion_dim]).assign(&input.x.slice(s![bi, j, ..]));
                row.slice_mut(s![c.motion_dim..]).assign(&input.y.slice(s![bi, j, ..]));
                r += 1;
            }
        }
        let frame_emb = w.input.forward(tokens.view());

        let time_feats = |ts: &[usize]| {
            let mut m = Array2::<F>::zeros((b, d));
            for (mut row, &t) in m.rows_mut().into_iter().zip(ts) {
                row.zip_mut_with(&timestep_embedding(t, d), |r, &v| *r = F::of(v));
            }
            m
        };
        let run_mlp = |mlp: &TimeMlp<F>, feat: &Array2<F>| {
            let pre = mlp.fc1.forward(feat.view());
            let hidden = pre.mapv(silu);
            let out = mlp.fc2.forward(hidden.view());
            (pre, hidden, out)
        };
        let tx_feat = time_feats(input.t_x);
        let ty_feat = time_feats(input.t_y);
        let (tx_pre, tx_hidden, tx_out) = run_mlp(&w.time_x, &tx_feat);
        let (ty_pre, ty_hidden, ty_out) = run_mlp(&w.time_y, &ty_feat);

        let cond_null: Vec<bool> = input.cond.iter().map(|c| c.is_none()).collect();
        let mut cond_in = Array2::<F>::zeros((b, c.cond_dim));
        for (mut row, cnd) in cond_in.rows_mut().into_iter().zip(input.cond) {
            if let Some(v) = cnd {
                row.assign(v);
            }
        }
        let cond_out = w.cond.forward(cond_in.view());

        let mut h = Array2::<F>::zeros((rows, d));
        let mut f = 0;
        for (bi, &(start, len)) in spans.iter().enumerate() {
            h.row_mut(start).assign(&tx_out.row(bi));
            h.row_mut(start + 1).assign(&ty_out.row(bi));
            if cond_null[bi] {
                h.row_mut(start + 2).assign(&w.null_cond);
            } else {
                h.row_mut(start + 2).assign(&cond_out.row(bi));
            }
            let k = len - PREFIX_TOKENS;
            h.slice_mut(s![start + PREFIX_TOKENS..start + len, ..])
                .assign(&frame_emb.slice(s![f..f + k, ..]));
            f += k;
            for p in 0..PREFIX_TOKENS {
                let mut hr = h.row_mut(start + p);
                hr += &w.pos.row(p);
            }
            for (i, &j) in valid[bi].iter().enumerate() {
                let mut hr = h.row_mut(start + PREFIX_TOKENS + i);
                hr += &w.pos.row(PREFIX_TOKENS + j);
            }
        }

        let hd = c.head_dim();
        let scale = F::of(1.0 / (hd as f64).sqrt());
        let p = c.dropout;
        let mut caches = Vec::with_capacity(w.blocks.len());
        for blk in &w.blocks {
            let (z_attn, ln_attn) = blk.ln_attn.forward(h.view());
            let qkv = blk.qkv.forward(z_attn.view());
            let mut attn = Array2::<F>::zeros((rows, d));
            let mut probs = Vec::with_capacity(b * c.heads);
            for &(start, len) in &spans {
                let r = start..start + len;
                for hh in 0..c.heads {
                    let q = qkv.slice(s![r.clone(), hh * hd..(hh + 1) * hd]);
                    let k = qkv.slice(s![r.clone(), d + hh * hd..d + (hh + 1) * hd]);
                    let v = qkv.slice(s![r.clone(), 2 * d + hh * hd..2 * d + (hh + 1) * hd]);
                    let mut sc = Array2::<F>::zeros((len, len));
                    general_mat_mul(scale, &q, &k.t(), F::zero(), &mut sc);
                    for row in sc.as_slice_mut().expect("standard layout").chunks_exact_mut(len) {
                        softmax_row(row);
                    }
                    general_mat_mul(
                        F::one(),
                        &sc,
                        &v,
                        F::zero(),
                        &mut attn.slice_mut(s![r.clone(), hh * hd..(hh + 1) * hd]),
                    );
                    probs.push(sc);
                }
            }
            let mut a_out = blk.attn_out.forward(attn.view());
            let drop_attn = match rng.as_deref_mut() {
                Some(g) if p > 0.0 => {
                    let m = dropout_mask(rows, d, p, g);
                    a_out *= &m;
                    Some(m)
                }
                _ => None,
            };
            h += &a_out;

            let (z_ff, ln_ff) = blk.ln_ff.forward(h.view());
            let pre_act = blk.ff_in.forward(z_ff.view());
            let mut act = Array2::<F>::zeros(pre_act.raw_dim());
            let mut act_tanh = Array2::<F>::zeros(pre_act.raw_dim());
            for ((a, t), &x) in act
                .as_slice_mut()
                .expect("standard layout")
                .iter_mut()
                .zip(act_tanh.as_slice_mut().expect("standard layout"))
                .zip(pre_act.as_slice().expect("standard layout"))
            {
                (*a, *t) = gelu(x);
            }
            let mut f_out = blk.ff_out.forward(act.view());
            let drop_ff = match rng.as_deref_mut() {
                Some(g) if p > 0.0 => {
                    let m = dropout_mask(rows, d, p, g);
                    f_out *= &m;
                    Some(m)
                }
                _ => None,
            };
            h += &f_out;
            caches.push(BlockCache {
                ln_attn,
                z_attn,
                qkv,
                probs,
                attn,
                drop_attn,
                ln_ff,
                z_ff,
                pre_act,
                act,
                act_tanh,
                drop_ff,
            });
        }

        let (z, final_ln) = w.final_ln.forward(h.view());
        let mut frame_out = Array2::<F>::zeros((n_tokens, d));
        let mut f = 0;
        for &(start, len) in &spans {
            let k = len - PREFIX_TOKENS;
            frame_out
                .slice_mut(s![f..f + k, ..])
                .assign(&z.slice(s![start + PREFIX_TOKENS..start + len, ..]));
            f += k;
        }
        let x_hat = w.head_x.forward(frame_out.view());
        let y_hat = w.head_y.forward(frame_out.view());
        let mut out = DenoiserOutput {
            x: Array3::zeros((b, n, c.motion_dim)),
            y: Array3::zeros((b, n, c.text_dim)),
        };
        let mut f = 0;
        for (bi, v) in valid.iter().enumerate() {
            for &j in v {
                out.x.slice_mut(s![bi, j, ..]).assign(&x_hat.row(f));
                out.y.slice_mut(s![bi, j, ..]).assign(&y_hat.row(f));
                f += 1;
            }
        }
        let cache = ForwardCache {
            batch: b,
            frames: n,
            spans,
            valid,
            tokens,
            tx_feat,
            tx_pre,
            tx_hidden,
            ty_feat,
            ty_pre,
            ty_hidden,
            cond_in,
            cond_null,
            blocks: caches,
            final_ln,
            frame_out,
        };
        Ok((out, cache))
    }

    /// Gradients of a scalar loss given its gradients w.r.t. both outputs.
    /// Entries of `d_x`/`d_y` at masked frames are ignored.
    pub fn backward(&self, cache: &ForwardCache<F>, d_x: ArrayView3<F>, d_y: ArrayView3<F>) -> DenoiserWeights<F> {
        let c = &self.config;
        let w = &self.weights;
        let mut g = DenoiserWeights::<F>::zeros(c);
        let b = cache.batch;
        debug_assert_eq!(d_x.dim().1, cache.frames);
        let d = c.model_dim;
        let rows: usize = cache.spans.iter().map(|s| s.1).sum();
        let n_tokens = cache.tokens.nrows();
        let hd = c.head_dim();
        let scale = F::of(1.0 / (hd as f64).sqrt());

        let mut gx = Array2::<F>::zeros((n_tokens, c.motion_dim));
        let mut gy = Array2::<F>::zeros((n_tokens, c.text_dim));
        let mut f = 0;
        for (bi, v) in cache.valid.iter().enumerate() {
            for &j in v {
                gx.row_mut(f).assign(&d_x.slice(s![bi, j, ..]));
                gy.row_mut(f).assign(&d_y.slice(s![bi, j, ..]));
                f += 1;
            }
        }
        let mut d_frame = w.head_x.backward(cache.frame_out.view(), gx.view(), &mut g.head_x);
        d_frame += &w.head_y.backward(cache.frame_out.view(), gy.view(), &mut g.head_y);
        let mut d_z = Array2::<F>::zeros((rows, d));
        let mut f = 0;
        for &(start, len) in &cache.spans {
            let k = len - PREFIX_TOKENS;
            d_z.slice_mut(s![start + PREFIX_TOKENS..start + len, ..])
                .assign(&d_frame.slice(s![f..f + k, ..]));
            f += k;
        }
        let mut d_h = w.final_ln.backward(&cache.final_ln, d_z.view(), &mut g.final_ln);

        for ((blk, bc), gb) in w.blocks.iter().zip(&cache.blocks).zip(g.blocks.iter_mut()).rev() {
            let mut d_f = d_h.clone();
            if let Some(m) = &bc.drop_ff {
                d_f *= m;
            }
            let mut d_act = blk.ff_out.backward(bc.act.view(), d_f.view(), &mut gb.ff_out);
            for ((gv, &x), &t) in d_act
                .as_slice_mut()
                .expect("standard layout")
                .iter_mut()
                .zip(bc.pre_act.as_slice().expect("standard layout"))
                .zip(bc.act_tanh.as_slice().expect("standard layout"))
            {
                *gv = *gv * gelu_grad(x, t);
            }
            let d_zff = blk.ff_in.backward(bc.z_ff.view(), d_act.view(), &mut gb.ff_in);
            d_h += &blk.ln_ff.backward(&bc.ln_ff, d_zff.view(), &mut gb.ln_ff);

            let mut d_a = d_h.clone();
            if let Some(m) = &bc.drop_attn {
                d_a *= m;
            }
            let d_attn = blk.attn_out.backward(bc.attn.view(), d_a.view(), &mut gb.attn_out);
            let mut d_qkv = Array2::<F>::zeros((rows, 3 * d));
            for (bi, &(start, len)) in cache.spans.iter().enumerate() {
                let r = start..start + len;
                for hh in 0..c.heads {
                    let pr = &bc.probs[bi * c.heads + hh];
                    let (qc, kc, vc) = (hh * hd, d + hh * hd, 2 * d + hh * hd);
                    let q = bc.qkv.slice(s![r.clone(), qc..qc + hd]);
                    let k = bc.qkv.slice(s![r.clone(), kc..kc + hd]);
                    let v = bc.qkv.slice(s![r.clone(), vc..vc + hd]);
                    let d_o = d_attn.slice(s![r.clone(), qc..qc + hd]);
                    let mut d_p = d_o.dot(&v.t());
                    general_mat_mul(F::one(), &pr.t(), &d_o, F::zero(), &mut d_qkv.slice_mut(s![r.clone(), vc..vc + hd]));
                    for (dr, pr_row) in d_p
                        .as_slice_mut()
                        .expect("standard layout")
                        .chunks_exact_mut(len)
                        .zip(pr.as_slice().expect("standard layout").chunks_exact(len))
                    {
                        let dot = dot_lanes(dr, pr_row);
                        for (gv, &pv) in dr.iter_mut().zip(pr_row) {
                            *gv = pv * (*gv - dot) * scale;
                        }
                    }
                    general_mat_mul(F::one(), &d_p, &k, F::zero(), &mut d_qkv.slice_mut(s![r.clone(), qc..qc + hd]));
                    general_mat_mul(F::one(), &d_p.t(), &q, F::zero(), &mut d_qkv.slice_mut(s![r.clone(), kc..kc + hd]));
                }
            }
            let d_zat = blk.qkv.backward(bc.z_attn.view(), d_qkv.view(), &mut gb.qkv);
            d_h += &blk.ln_attn.backward(&bc.ln_attn, d_zat.view(), &mut gb.ln_attn);
        }

        let mut d_frame_emb = Array2::<F>::zeros((n_tokens, d));
        let mut d_tx = Array2::<F>::zeros((b, d));
        let mut d_ty = Array2::<F>::zeros((b, d));
        let mut d_cond = Array2::<F>::zeros((b, d));
        let mut f = 0;
        for (bi, &(start, len)) in cache.spans.iter().enumerate() {
            for p in 0..PREFIX_TOKENS {
                let mut gp = g.pos.row_mut(p);
                gp += &d_h.row(start + p);
            }
            for (i, &j) in cache.valid[bi].iter().enumerate() {
                let mut gp = g.pos.row_mut(PREFIX_TOKENS + j);
                gp += &d_h.row(start + PREFIX_TOKENS + i);
            }
            d_tx.row_mut(bi).assign(&d_h.row(start));
            d_ty.row_mut(bi).assign(&d_h.row(start + 1));
            if cache.cond_null[bi] {
                g.null_cond += &d_h.row(start + 2);
            } else {
                d_cond.row_mut(bi).assign(&d_h.row(start + 2));
            }
            let k = len - PREFIX_TOKENS;
            d_frame_emb
                .slice_mut(s![f..f + k, ..])
                .assign(&d_h.slice(s![start + PREFIX_TOKENS..start + len, ..]));
            f += k;
        }
        w.input.accumulate(cache.tokens.view(), d_frame_emb.view(), &mut g.input);
        w.cond.accumulate(cache.cond_in.view(), d_cond.view(), &mut g.cond);

        let mlp_back = |mlp: &TimeMlp<F>, gm: &mut TimeMlp<F>, feat: &Array2<F>, pre: &Array2<F>, hidden: &Array2<F>, dy: &Array2<F>| {
            let mut d_hidden = mlp.fc2.backward(hidden.view(), dy.view(), &mut gm.fc2);
            d_hidden.zip_mut_with(pre, |g, &x| *g = *g * silu_grad(x));
            mlp.fc1.accumulate(feat.view(), d_hidden.view(), &mut gm.fc1);
        };
        mlp_back(&w.time_x, &mut g.time_x, &cache.tx_feat, &cache.tx_pre, &cache.tx_hidden, &d_tx);
        mlp_back(&w.time_y, &mut g.time_y, &cache.ty_feat, &cache.ty_pre, &cache.ty_hidden, &d_ty);
        g
    }
}

/// L2 norm over all gradient entries.
pub fn gradient_norm<F: Real>(g: &DenoiserWeights<F>) -> f64 {
    g.tensors()
        .iter()
        .map(|(_, t)| t.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}
