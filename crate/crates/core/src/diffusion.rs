//! Denoising diffusion over day-level embedding sequences.
//!
//! The model learns to reconstruct clean 48×8 sequences from Gaussian-corrupted
//! ones across a continuous noise scale σ (x-prediction). Sampling is plain
//! deterministic DDIM on a geometric σ ladder, seeded from either white noise
//! or a collaborative prior built by walking the city's OD matrix.
//!
//! The denoiser is parameterized as `D(x̃; σ) = x̃ + σ·F(c_in·x̃; σ, day)` with
//! `c_in = 1/√(1+σ²)` and a zero-initialized output projection, so a fresh (or
//! all-zero) network is exactly the identity map. The training objective
//! weights each sample by `1/(1+σ²)`; this is equivalent to re-shaping the σ
//! sampling law and keeps high-σ terms from drowning out the rest.

use crate::autoencoder::TrainConfig;
use crate::codec::EmbeddingSequence;
use crate::error::{Error, Result};
use crate::features::ODMatrix;
use crate::nn::{self, Adam, ParamLayout, SegId};
use crate::rng::{stream, Domain};
use crate::{EMBED_DIM, SLOT_COUNT};
use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Time-axis convolution kernel width.
pub const KERNEL: usize = 5;
/// Dilation cycle across residual blocks.
pub const DILATIONS: [usize; 4] = [1, 2, 4, 8];
/// Fourier frequency pairs used to encode log σ.
pub const N_FREQ: usize = 8;
/// Walk step probability for the collaborative prior.
pub const P_MOVE: f64 = 0.15;
/// Samples per denoiser call during generation. Fixed so that outputs do not
/// depend on how many samples are requested or how many threads run.
const GEN_CHUNK: usize = 32;

const ENTRIES: f64 = (SLOT_COUNT * EMBED_DIM) as f64;

// ---------------------------------------------------------------------------
// Noise schedule

/// Continuous noise scale: log-uniform draws for training, geometric ladder
/// for sampling.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub ddim_steps: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule { sigma_min: 0.02, sigma_max: 10.0, ddim_steps: 50 }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return Err(Error::config("noise schedule requires 0 < sigma_min < sigma_max"));
        }
        if self.ddim_steps == 0 {
            return Err(Error::config("ddim_steps must be at least 1"));
        }
        Ok(())
    }

    /// Training draw: σ = exp(U(ln σ_min, ln σ_max)).
    pub fn sample_sigma(&self, rng: &mut ChaCha8Rng) -> f64 {
        rng.random_range(self.sigma_min.ln()..self.sigma_max.ln()).exp()
    }

    /// Strictly decreasing geometric ladder σ_max → σ_min of `ddim_steps`
    /// values. A single step degenerates to `[sigma_max]`.
    pub fn ladder(&self) -> Vec<f64> {
        if self.ddim_steps == 1 {
            return vec![self.sigma_max];
        }
        let span = (self.sigma_min / self.sigma_max).ln();
        (0..self.ddim_steps)
            .map(|i| self.sigma_max * (span * i as f64 / (self.ddim_steps - 1) as f64).exp())
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Model configuration

/// Denoiser width/depth plus the init seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub dim: usize,
    pub blocks: usize,
    pub seed: u64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig::preset("small", 0).unwrap()
    }
}

impl DiffusionConfig {
    /// Named size presets: ≈0.7M / ≈4M / ≈15.3M parameters.
    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        let (dim, blocks) = match name {
            "small" => (171, 4),
            "medium" => (333, 6),
            "large" => (564, 8),
            other => {
                return Err(Error::config(format!(
                    "unknown model preset `{other}` (expected small, medium or large)"
                )))
            }
        };
        Ok(DiffusionConfig { dim, blocks, seed })
    }
}

/// Closed form for the layout size: 6Bd² + (41+2B)d + 8.
pub fn param_count(dim: usize, blocks: usize) -> usize {
    6 * blocks * dim * dim + (41 + 2 * blocks) * dim + 8
}

/// Preset label for a (dim, blocks) pair, used in checkpoints and logs.
pub fn preset_name(dim: usize, blocks: usize) -> &'static str {
    match (dim, blocks) {
        (171, 4) => "small",
        (333, 6) => "medium",
        (564, 8) => "large",
        _ => "custom",
    }
}

// ---------------------------------------------------------------------------
// Denoiser parameters

#[derive(Debug, Clone, Copy)]
struct BlockIds {
    conv_w: SegId,
    conv_b: SegId,
    mix_w: SegId,
    mix_b: SegId,
}

#[derive(Debug, Clone)]
struct DenoiserIds {
    lift_w: SegId,
    lift_b: SegId,
    sig_w: SegId,
    sig_b: SegId,
    day_emb: SegId,
    blocks: Vec<BlockIds>,
    proj_w: SegId,
    proj_b: SegId,
}

fn denoiser_layout(dim: usize, blocks: usize) -> (ParamLayout, DenoiserIds) {
    let mut l = ParamLayout::new();
    let lift_w = l.add("lift_w", dim, EMBED_DIM);
    let lift_b = l.add("lift_b", 1, dim);
    let sig_w = l.add("sig_w", dim, 2 * N_FREQ);
    let sig_b = l.add("sig_b", 1, dim);
    let day_emb = l.add("day_emb", 7, dim);
    let block_ids = (0..blocks)
        .map(|_| BlockIds {
            conv_w: l.add("conv_w", dim, KERNEL * dim),
            conv_b: l.add("conv_b", 1, dim),
            mix_w: l.add("mix_w", dim, dim),
            mix_b: l.add("mix_b", 1, dim),
        })
        .collect();
    let proj_w = l.add("proj_w", EMBED_DIM, dim);
    let proj_b = l.add("proj_b", 1, EMBED_DIM);
    let ids = DenoiserIds { lift_w, lift_b, sig_w, sig_b, day_emb, blocks: block_ids, proj_w, proj_b };
    (l, ids)
}

/// Residual conv denoiser over stacked 48×8 sequences.
#[derive(Debug, Clone)]
pub struct DenoiserParams {
    pub dim: usize,
    pub blocks: usize,
    pub seed: u64,
    pub data: Vec<f64>,
    layout: ParamLayout,
    ids: DenoiserIds,
    posenc: Array2<f64>,
}

/// Activations kept from the forward pass for backprop.
struct ForwardTrace {
    xin: Array2<f64>,
    fourier: Array2<f64>,
    block_in: Vec<Array2<f64>>,
    conv_act: Vec<Array2<f64>>,
    mix_act: Vec<Array2<f64>>,
    h_final: Array2<f64>,
}

/// Multiply each sample's 48-row band by its own factor.
fn scale_bands(x: &mut Array2<f64>, factors: &[f64]) {
    for (i, &f) in factors.iter().enumerate() {
        x.slice_mut(s![i * SLOT_COUNT..(i + 1) * SLOT_COUNT, ..]).mapv_inplace(|v| v * f);
    }
}

impl DenoiserParams {
    pub fn init(cfg: &DiffusionConfig) -> Self {
        let (layout, ids) = denoiser_layout(cfg.dim, cfg.blocks);
        let mut data = vec![0.0; layout.total()];
        let mut rng = stream(cfg.seed, Domain::DiffusionInit, 0);
        nn::fill_uniform_fan_in(&mut rng, layout.slice_mut(&mut data, ids.lift_w), EMBED_DIM);
        nn::fill_uniform_fan_in(&mut rng, layout.slice_mut(&mut data, ids.sig_w), 2 * N_FREQ);
        nn::fill_uniform_fan_in(&mut rng, layout.slice_mut(&mut data, ids.day_emb), cfg.dim);
        for blk in &ids.blocks {
            nn::fill_uniform_fan_in(&mut rng, layout.slice_mut(&mut data, blk.conv_w), KERNEL * cfg.dim);
            nn::fill_uniform_fan_in(&mut rng, layout.slice_mut(&mut data, blk.mix_w), cfg.dim);
        }
        // proj stays zero: the fresh network is the identity denoiser, which is
        // already the optimum at σ→0 and keeps early training stable.
        Self::from_parts(cfg.dim, cfg.blocks, cfg.seed, data)
    }

    pub fn from_parts(dim: usize, blocks: usize, seed: u64, data: Vec<f64>) -> Self {
        let (layout, ids) = denoiser_layout(dim, blocks);
        assert_eq!(data.len(), layout.total(), "parameter vector length mismatch");
        let posenc = nn::sinusoidal_posenc(SLOT_COUNT, dim);
        DenoiserParams { dim, blocks, seed, data, layout, ids, posenc }
    }

    pub fn n_params(&self) -> usize {
        self.layout.total()
    }

    /// `D(x̃; σ, day)` for a stack of `sigmas.len()` sequences (48 rows each).
    pub fn forward_batch(&self, x_tilde: &ArrayView2<f64>, sigmas: &[f64], days: &[u8]) -> Array2<f64> {
        self.forward_full(x_tilde, sigmas, days, false).0
    }

    fn forward_full(
        &self,
        x_tilde: &ArrayView2<f64>,
        sigmas: &[f64],
        days: &[u8],
        want_trace: bool,
    ) -> (Array2<f64>, Option<ForwardTrace>) {
        let n = sigmas.len();
        assert_eq!(x_tilde.nrows(), n * SLOT_COUNT);
        assert_eq!(x_tilde.ncols(), EMBED_DIM);
        assert_eq!(days.len(), n);
        assert!(days.iter().all(|&d| d < 7), "day_of_week out of range");
        let (l, ids, p) = (&self.layout, &self.ids, &self.data[..]);

        let mut xin = x_tilde.to_owned();
        let c_in: Vec<f64> = sigmas.iter().map(|&s| 1.0 / (1.0 + s * s).sqrt()).collect();
        scale_bands(&mut xin, &c_in);

        let mut h = nn::linear(&xin.view(), &l.mat(p, ids.lift_w), l.slice(p, ids.lift_b));

        // Conditioning vector per sample: log-σ Fourier map plus day label.
        // It is re-injected additively at every block entry — a stem-only shift
        // is too weak for the network to vary its sharpness with σ.
        let mut flat = Vec::with_capacity(n * 2 * N_FREQ);
        for &sig in sigmas {
            flat.extend(nn::fourier_features(sig.ln(), N_FREQ));
        }
        let fourier = Array2::from_shape_vec((n, 2 * N_FREQ), flat).unwrap();
        let mut cond = nn::linear(&fourier.view(), &l.mat(p, ids.sig_w), l.slice(p, ids.sig_b));
        let day_emb = l.mat(p, ids.day_emb);
        for i in 0..n {
            let mut row = cond.row_mut(i);
            row += &day_emb.row(days[i] as usize);
            let mut band = h.slice_mut(s![i * SLOT_COUNT..(i + 1) * SLOT_COUNT, ..]);
            band += &self.posenc;
        }

        let mut block_in = Vec::new();
        let mut conv_act = Vec::new();
        let mut mix_act = Vec::new();
        for (b, blk) in ids.blocks.iter().enumerate() {
            let dil = DILATIONS[b % DILATIONS.len()];
            let mut hb = h.clone();
            for i in 0..n {
                let mut band = hb.slice_mut(s![i * SLOT_COUNT..(i + 1) * SLOT_COUNT, ..]);
                band += &cond.slice(s![i..i + 1, ..]);
            }
            if want_trace {
                block_in.push(hb.clone());
            }
            let mut u = nn::conv1d(&hb.view(), &l.mat(p, blk.conv_w), l.slice(p, blk.conv_b), SLOT_COUNT, KERNEL, dil);
            nn::tanh_inplace(&mut u);
            let mut v = nn::linear(&u.view(), &l.mat(p, blk.mix_w), l.slice(p, blk.mix_b));
            nn::tanh_inplace(&mut v);
            h += &v;
            if want_trace {
                conv_act.push(u);
                mix_act.push(v);
            }
        }

        let f = nn::linear(&h.view(), &l.mat(p, ids.proj_w), l.slice(p, ids.proj_b));
        let mut out = f;
        scale_bands(&mut out, sigmas);
        ndarray::Zip::from(&mut out).and(x_tilde).for_each(|o, &x| *o += x);

        let trace = want_trace.then(|| ForwardTrace {
            xin,
            fourier,
            block_in,
            conv_act,
            mix_act,
            h_final: h,
        });
        (out, trace)
    }

    /// σ-weighted batch objective: Σ_i w_i ‖D(x_i+ε_i) − x_i‖² / (384 n).
    pub fn batch_loss(
        &self,
        x0: &ArrayView2<f64>,
        noise: &ArrayView2<f64>,
        sigmas: &[f64],
        days: &[u8],
        weights: &[f64],
    ) -> f64 {
        let x_tilde = x0 + noise;
        let out = self.forward_batch(&x_tilde.view(), sigmas, days);
        let r = &out - x0;
        let mut loss = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            let band = r.slice(s![i * SLOT_COUNT..(i + 1) * SLOT_COUNT, ..]);
            loss += w * band.iter().map(|v| v * v).sum::<f64>();
        }
        loss / (ENTRIES * sigmas.len() as f64)
    }

    /// [`Self::batch_loss`] plus accumulated parameter gradients.
    pub fn batch_loss_and_grads(
        &self,
        x0: &ArrayView2<f64>,
        noise: &ArrayView2<f64>,
        sigmas: &[f64],
        days: &[u8],
        weights: &[f64],
        grads: &mut [f64],
    ) -> f64 {
        let n = sigmas.len();
        let x_tilde = x0 + noise;
        let (out, trace) = self.forward_full(&x_tilde.view(), sigmas, days, true);
        let tr = trace.unwrap();
        let (l, ids, p) = (&self.layout, &self.ids, &self.data[..]);

        let mut r = &out - x0;
        let mut loss = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            let band = r.slice(s![i * SLOT_COUNT..(i + 1) * SLOT_COUNT, ..]);
            loss += w * band.iter().map(|v| v * v).sum::<f64>();
        }
        loss /= ENTRIES * n as f64;

        // d loss / d D  scaled per sample, then through the σ·F skip.
        let dscale: Vec<f64> = weights.iter().map(|w| 2.0 * w / (ENTRIES * n as f64)).collect();
        scale_bands(&mut r, &dscale);
        let mut df = r;
        scale_bands(&mut df, sigmas);

        let (dw, db) = nn::grad_pair(l, grads, ids.proj_w, ids.proj_b);
        let mut dh = nn::linear_backward(&tr.h_final.view(), &l.mat(p, ids.proj_w), &df.view(), dw, db);

        // cond was broadcast over each sample's 48 rows at every block entry
        let mut dcond = Array2::zeros((n, self.dim));
        for (b, blk) in ids.blocks.iter().enumerate().rev() {
            let dil = DILATIONS[b % DILATIONS.len()];
            let mut dv = dh.clone();
            nn::tanh_backward_inplace(&mut dv, &tr.mix_act[b]);
            let (dw, db) = nn::grad_pair(l, grads, blk.mix_w, blk.mix_b);
            let mut du = nn::linear_backward(&tr.conv_act[b].view(), &l.mat(p, blk.mix_w), &dv.view(), dw, db);
            nn::tanh_backward_inplace(&mut du, &tr.conv_act[b]);
            let (dw, db) = nn::grad_pair(l, grads, blk.conv_w, blk.conv_b);
            let dhb = nn::conv1d_backward(
                &tr.block_in[b].view(),
                &l.mat(p, blk.conv_w),
                &du.view(),
                SLOT_COUNT,
                KERNEL,
                dil,
                dw,
                db,
            );
            for i in 0..n {
                let band = dhb.slice(s![i * SLOT_COUNT..(i + 1) * SLOT_COUNT, ..]);
                let mut row = dcond.row_mut(i);
                row += &band.sum_axis(Axis(0));
            }
            dh += &dhb;
        }
        {
            let mut dday = l.mat_mut(grads, ids.day_emb);
            for i in 0..n {
                let mut row = dday.row_mut(days[i] as usize);
                row += &dcond.row(i);
            }
        }
        let (dw, db) = nn::grad_pair(l, grads, ids.sig_w, ids.sig_b);
        nn::linear_backward(&tr.fourier.view(), &l.mat(p, ids.sig_w), &dcond.view(), dw, db);
        let (dw, db) = nn::grad_pair(l, grads, ids.lift_w, ids.lift_b);
        nn::linear_backward(&tr.xin.view(), &l.mat(p, ids.lift_w), &dh.view(), dw, db);

        loss
    }
}

// ---------------------------------------------------------------------------
// Standardization

/// Per-dimension moments of the training embeddings; generation inverts them.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StandardizationStats {
    pub fn fit(corpus: &[EmbeddingSequence]) -> Self {
        let n = (corpus.len() * SLOT_COUNT) as f64;
        let mut mean = vec![0.0; EMBED_DIM];
        for seq in corpus {
            for row in seq.x.rows() {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut var = vec![0.0; EMBED_DIM];
        for seq in corpus {
            for row in seq.x.rows() {
                for ((d, m), &v) in var.iter_mut().zip(&mean).zip(row) {
                    *d += (v - m) * (v - m);
                }
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt().max(1e-6)).collect();
        StandardizationStats { mean, std }
    }

    pub fn standardize_inplace(&self, x: &mut Array2<f64>) {
        for mut row in x.rows_mut() {
            for (v, (m, s)) in row.iter_mut().zip(self.mean.iter().zip(&self.std)) {
                *v = (*v - m) / s;
            }
        }
    }

    pub fn destandardize_inplace(&self, x: &mut Array2<f64>) {
        for mut row in x.rows_mut() {
            for (v, (m, s)) in row.iter_mut().zip(self.mean.iter().zip(&self.std)) {
                *v = *v * s + m;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Spec-level loss

/// Unweighted per-entry loss ‖D(x+ε; σ, day) − x‖²/384 for one sequence.
/// `eps` is the full noise realization (already scaled to variance σ²).
pub fn diffusion_loss(
    params: &DenoiserParams,
    x: &EmbeddingSequence,
    sigma: f64,
    eps: &ArrayView2<f64>,
    day: u8,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    if !(sigma >= schedule.sigma_min && sigma <= schedule.sigma_max) {
        return Err(Error::config(format!(
            "σ = {sigma} outside the schedule range [{}, {}]",
            schedule.sigma_min, schedule.sigma_max
        )));
    }
    if x.x.iter().any(|v| !v.is_finite()) || eps.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite input to diffusion_loss"));
    }
    if eps.dim() != (SLOT_COUNT, EMBED_DIM) {
        return Err(Error::data("noise must be 48×8"));
    }
    let x_tilde = &x.x + eps;
    let out = params.forward_batch(&x_tilde.view(), &[sigma], &[day]);
    let r = &out - &x.x;
    Ok(r.iter().map(|v| v * v).sum::<f64>() / ENTRIES)
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, Serialize)]
pub struct DiffTraceRow {
    pub epoch: usize,
    pub loss: f64,
}

/// Fit the denoiser on a corpus of (unstandardized) embedding sequences.
pub fn train_diffusion(
    corpus: &[EmbeddingSequence],
    schedule: &NoiseSchedule,
    model: &DiffusionConfig,
    cfg: &TrainConfig,
) -> Result<(DenoiserParams, StandardizationStats, Vec<DiffTraceRow>)> {
    if corpus.is_empty() {
        return Err(Error::data("diffusion training corpus is empty"));
    }
    schedule.validate()?;
    let stats = StandardizationStats::fit(corpus);
    let n = corpus.len();
    let mut xs = Array2::zeros((n * SLOT_COUNT, EMBED_DIM));
    for (i, seq) in corpus.iter().enumerate() {
        xs.slice_mut(s![i * SLOT_COUNT..(i + 1) * SLOT_COUNT, ..]).assign(&seq.x);
    }
    stats.standardize_inplace(&mut xs);
    let days: Vec<u8> = corpus.iter().map(|s| s.day_of_week).collect();

    let mut params = DenoiserParams::init(model);
    let mut grads = vec![0.0; params.n_params()];
    let mut opt = Adam::new(params.n_params(), cfg.lr);
    let batch = cfg.batch.max(1).min(n);
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut rng = stream(cfg.seed, Domain::DiffusionTrain, epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let bn = chunk.len();
            let mut x0 = Array2::zeros((bn * SLOT_COUNT, EMBED_DIM));
            let mut bdays = Vec::with_capacity(bn);
            for (j, &i) in chunk.iter().enumerate() {
                x0.slice_mut(s![j * SLOT_COUNT..(j + 1) * SLOT_COUNT, ..])
                    .assign(&xs.slice(s![i * SLOT_COUNT..(i + 1) * SLOT_COUNT, ..]));
                bdays.push(days[i]);
            }
            let mut sigmas = Vec::with_capacity(bn);
            let mut weights = Vec::with_capacity(bn);
            let mut noise = Array2::zeros((bn * SLOT_COUNT, EMBED_DIM));
            for j in 0..bn {
                let sig = schedule.sample_sigma(&mut rng);
                for v in noise.slice_mut(s![j * SLOT_COUNT..(j + 1) * SLOT_COUNT, ..]).iter_mut() {
                    let g: f64 = rng.sample(StandardNormal);
                    *v = sig * g;
                }
                weights.push(1.0 / (sig * sig));
                sigmas.push(sig);
            }
            grads.fill(0.0);
            let loss = params.batch_loss_and_grads(&x0.view(), &noise.view(), &sigmas, &bdays, &weights, &mut grads);
            if !loss.is_finite() {
                return Err(Error::numeric(format!("diffusion training diverged at epoch {epoch}")));
            }
            opt.step(&mut params.data, &grads);
            epoch_loss += loss * bn as f64 / n as f64;
        }
        trace.push(DiffTraceRow { epoch, loss: epoch_loss });
    }
    Ok((params, stats, trace))
}

/// Finite-difference audit of the training gradients at the current params.
pub fn finite_diff_check(
    params: &DenoiserParams,
    x0: &ArrayView2<f64>,
    noise: &ArrayView2<f64>,
    sigmas: &[f64],
    days: &[u8],
    weights: &[f64],
    n_checks: usize,
    seed: u64,
) -> f64 {
    let mut analytic = vec![0.0; params.n_params()];
    params.batch_loss_and_grads(x0, noise, sigmas, days, weights, &mut analytic);
    let mut rng = stream(seed, Domain::FiniteDiff, 1);
    let indices: Vec<usize> = (0..n_checks).map(|_| rng.random_range(0..params.n_params())).collect();
    let (dim, blocks, pseed) = (params.dim, params.blocks, params.seed);
    let mut data = params.data.clone();
    let loss = |p: &[f64]| {
        let tmp = DenoiserParams::from_parts(dim, blocks, pseed, p.to_vec());
        tmp.batch_loss(x0, noise, sigmas, days, weights)
    };
    nn::finite_diff_max_rel_err(loss, &mut data, &analytic, &indices, 1e-4)
}

// ---------------------------------------------------------------------------
// Collaborative prior

/// Blend a Gaussian draw with an OD-walk pseudo-day: `z_p = √λ·s + √(1−λ)·z`.
///
/// `loc_emb_std` must hold the standardized embedding of every location (the
/// same table the decoder matches against). An all-zero OD matrix degrades to
/// the pure Gaussian prior with a warning.
pub fn collab_noise_prior(
    od: &ODMatrix,
    z: &Array2<f64>,
    lambda: f64,
    loc_emb_std: &ArrayView2<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config("collaborative mix weight λ must lie in [0, 1]"));
    }
    if z.dim() != (SLOT_COUNT, EMBED_DIM) {
        return Err(Error::data("noise draw must be 48×8"));
    }
    if od.dim != loc_emb_std.nrows() {
        return Err(Error::data(format!(
            "OD matrix is {}×{0} but {} location embeddings were supplied",
            od.dim,
            loc_emb_std.nrows()
        )));
    }
    if od.total() <= 0.0 {
        log::warn!("all-zero OD matrix: collaborative prior falls back to white noise");
        return Ok(z.clone());
    }
    if lambda == 0.0 {
        return Ok(z.clone());
    }

    // Pseudo-day: start ∝ row sums, then 48 stay-or-move decisions.
    let row_sums: Vec<f64> = (0..od.dim).map(|i| od.row(i).iter().sum()).collect();
    let mut cur = weighted_pick(&row_sums, rng);
    let mut s = Array2::zeros((SLOT_COUNT, EMBED_DIM));
    for slot in 0..SLOT_COUNT {
        if rng.random_range(0.0..1.0) < P_MOVE && row_sums[cur] > 0.0 {
            cur = weighted_pick(od.row(cur), rng);
        }
        s.row_mut(slot).assign(&loc_emb_std.row(cur));
    }

    if lambda == 1.0 {
        return Ok(s);
    }
    let (a, b) = (lambda.sqrt(), (1.0 - lambda).sqrt());
    Ok(&s * a + &(z * b))
}

fn weighted_pick(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

// ---------------------------------------------------------------------------
// DDIM sampling

/// Trajectories-per-person scaling of the sample budget.
pub fn sample_count_for_city(total_population: f64, ratio: f64) -> usize {
    (total_population * ratio).round() as usize
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub n_samples: usize,
    pub day_of_week: u8,
    pub lambda: f64,
    pub seed: u64,
    pub population_ratio: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig { n_samples: 0, day_of_week: 0, lambda: 0.5, seed: 0, population_ratio: 0.01 }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("λ must lie in [0, 1]"));
        }
        if self.day_of_week > 6 {
            return Err(Error::config("day_of_week must lie in [0, 6]"));
        }
        if self.population_ratio < 0.0 {
            return Err(Error::config("population_ratio must be non-negative"));
        }
        Ok(())
    }
}

/// One deterministic DDIM pass over a fixed σ ladder. The denoiser closure
/// sees a stacked batch and the current σ; the final step returns the clean
/// estimate (σ → 0).
fn ddim_run(
    mut x: Array2<f64>,
    ladder: &[f64],
    mut denoise: impl FnMut(&Array2<f64>, f64) -> Array2<f64>,
) -> Array2<f64> {
    for (t, &sig) in ladder.iter().enumerate() {
        if t + 1 < ladder.len() && ladder[t + 1] == sig {
            continue; // equal-σ step is the identity; skip to keep it bit-exact
        }
        let xhat = denoise(&x, sig);
        if t + 1 < ladder.len() {
            let ratio = ladder[t + 1] / sig;
            x = &xhat + &((&x - &xhat) * ratio);
        } else {
            x = xhat;
        }
    }
    x
}

/// Draw `cfg.n_samples` embedding sequences. Each sample owns its own noise
/// and prior streams keyed by sample index, so the output is bit-identical
/// for any thread count and for any partition into requests.
///
/// The Gaussian innovation is additionally keyed by day-of-week, while the
/// collaborative prior is keyed by sample index alone: generating the seven
/// day labels under one seed gives sample `i` the same anchor walk (a stable
/// home) with fresh innovation each day, mirroring how a real user's week is
/// one routine plus daily variation.
pub fn ddim_generate(
    params: &DenoiserParams,
    stats: &StandardizationStats,
    schedule: &NoiseSchedule,
    cfg: &GenerationConfig,
    od: &ODMatrix,
    loc_emb: &ArrayView2<f64>,
) -> Result<Vec<EmbeddingSequence>> {
    cfg.validate()?;
    schedule.validate()?;
    if params.data.iter().all(|&v| v == 0.0) {
        return Err(Error::config("refusing to sample from an all-zero (untrained) denoiser"));
    }
    let n = cfg.n_samples;
    if n == 0 {
        return Ok(Vec::new());
    }

    let mut emb_std = loc_emb.to_owned();
    stats.standardize_inplace(&mut emb_std);

    // Per-sample priors, drawn serially from per-sample streams.
    let mut x_init = Array2::zeros((n * SLOT_COUNT, EMBED_DIM));
    for i in 0..n {
        let mut z = Array2::zeros((SLOT_COUNT, EMBED_DIM));
        let mut zrng = stream(cfg.seed, Domain::GenerateNoise, (i as u64) * 8 + cfg.day_of_week as u64);
        for v in z.iter_mut() {
            *v = zrng.sample(StandardNormal);
        }
        let mut prng = stream(cfg.seed, Domain::CollabPrior, i as u64);
        let zp = collab_noise_prior(od, &z, cfg.lambda, &emb_std.view(), &mut prng)?;
        x_init
            .slice_mut(s![i * SLOT_COUNT..(i + 1) * SLOT_COUNT, ..])
            .assign(&(&zp * schedule.sigma_max));
    }

    let ladder = schedule.ladder();
    let spans: Vec<(usize, usize)> = (0..n).step_by(GEN_CHUNK).map(|s| (s, (s + GEN_CHUNK).min(n))).collect();
    let chunks: Vec<Array2<f64>> = spans
        .par_iter()
        .map(|&(start, end)| {
            let bn = end - start;
            let x0 = x_init.slice(s![start * SLOT_COUNT..end * SLOT_COUNT, ..]).to_owned();
            let days = vec![cfg.day_of_week; bn];
            let sig_vec = vec![0.0; bn];
            let mut sig_buf = sig_vec;
            ddim_run(x0, &ladder, |x, sig| {
                sig_buf.iter_mut().for_each(|v| *v = sig);
                params.forward_batch(&x.view(), &sig_buf, &days)
            })
        })
        .collect();

    let mut out = Vec::with_capacity(n);
    for (chunk, &(start, end)) in chunks.iter().zip(&spans) {
        for i in 0..end - start {
            let mut x = chunk.slice(s![i * SLOT_COUNT..(i + 1) * SLOT_COUNT, ..]).to_owned();
            stats.destandardize_inplace(&mut x);
            out.push(EmbeddingSequence { x, day_of_week: cfg.day_of_week });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Checkpointing

#[derive(Serialize, Deserialize)]
struct DiffCheckpoint {
    version: u32,
    preset: String,
    dim: usize,
    blocks: usize,
    seed: u64,
    sigma_min: f64,
    sigma_max: f64,
    ddim_steps: usize,
    mean: Vec<f64>,
    std: Vec<f64>,
    data: Vec<f64>,
}

pub fn save_denoiser(
    path: &Path,
    params: &DenoiserParams,
    stats: &StandardizationStats,
    schedule: &NoiseSchedule,
) -> Result<()> {
    let ck = DiffCheckpoint {
        version: 1,
        preset: preset_name(params.dim, params.blocks).to_string(),
        dim: params.dim,
        blocks: params.blocks,
        seed: params.seed,
        sigma_min: schedule.sigma_min,
        sigma_max: schedule.sigma_max,
        ddim_steps: schedule.ddim_steps,
        mean: stats.mean.clone(),
        std: stats.std.clone(),
        data: params.data.clone(),
    };
    std::fs::write(path, serde_json::to_string(&ck)?)?;
    Ok(())
}

pub fn load_denoiser(path: &Path) -> Result<(DenoiserParams, StandardizationStats, NoiseSchedule)> {
    let ck: DiffCheckpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if ck.version != 1 {
        return Err(Error::data(format!("unsupported denoiser checkpoint version {}", ck.version)));
    }
    let params = DenoiserParams::from_parts(ck.dim, ck.blocks, ck.seed, ck.data);
    let stats = StandardizationStats { mean: ck.mean, std: ck.std };
    let schedule =
        NoiseSchedule { sigma_min: ck.sigma_min, sigma_max: ck.sigma_max, ddim_steps: ck.ddim_steps };
    schedule.validate()?;
    Ok((params, stats, schedule))
}

pub fn write_diff_trace_csv(path: &Path, trace: &[DiffTraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(e.to_string()))?;
    w.write_record(["epoch", "loss"]).map_err(|e| Error::data(e.to_string()))?;
    for row in trace {
        w.write_record([row.epoch.to_string(), row.loss.to_string()])
            .map_err(|e| Error::data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
