//! Multi-head location autoencoder.
//!
//! Encoder 38 → hidden → 8 (tanh trunk, linear embedding); decoder mirrors it
//! with four heads: pop (sigmoid), coords (sigmoid), poi (softmax) and rank
//! logits. Training minimizes the equally-weighted sum
//! `MSE(pop) + MSE(coords) + KL(poi ‖ p̂oi) + CE(rank)`.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureTable;
use crate::nn::{self, ParamLayout, SegId};
use crate::rng::{stream, Domain};
use crate::{EMBED_DIM, FEATURE_DIM, POI_DIM, RANK_CLASSES};

#[derive(Debug, Clone, Copy)]
pub struct AeConfig {
    pub hidden: usize,
    pub seed: u64,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig { hidden: 64, seed: 0 }
    }
}

/// Shared optimizer settings for both models.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 1e-3, batch: 128, epochs: 200, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy)]
struct AeIds {
    enc_w1: SegId,
    enc_b1: SegId,
    enc_w2: SegId,
    enc_b2: SegId,
    dec_w1: SegId,
    dec_b1: SegId,
    pop_w: SegId,
    pop_b: SegId,
    coord_w: SegId,
    coord_b: SegId,
    poi_w: SegId,
    poi_b: SegId,
    rank_w: SegId,
    rank_b: SegId,
}

fn ae_layout(hidden: usize) -> (ParamLayout, AeIds) {
    let mut l = ParamLayout::new();
    let ids = AeIds {
        enc_w1: l.add("enc_w1", hidden, FEATURE_DIM),
        enc_b1: l.add("enc_b1", 1, hidden),
        enc_w2: l.add("enc_w2", EMBED_DIM, hidden),
        enc_b2: l.add("enc_b2", 1, EMBED_DIM),
        dec_w1: l.add("dec_w1", hidden, EMBED_DIM),
        dec_b1: l.add("dec_b1", 1, hidden),
        pop_w: l.add("pop_w", 1, hidden),
        pop_b: l.add("pop_b", 1, 1),
        coord_w: l.add("coord_w", 2, hidden),
        coord_b: l.add("coord_b", 1, 2),
        poi_w: l.add("poi_w", POI_DIM, hidden),
        poi_b: l.add("poi_b", 1, POI_DIM),
        rank_w: l.add("rank_w", RANK_CLASSES, hidden),
        rank_b: l.add("rank_b", 1, RANK_CLASSES),
    };
    (l, ids)
}

#[derive(Debug, Clone)]
pub struct AutoencoderParams {
    pub hidden: usize,
    pub seed: u64,
    pub data: Vec<f64>,
    layout: ParamLayout,
    ids: AeIds,
}

/// Decoded heads for a batch: each field has one row per input embedding.
pub struct DecodedHeads {
    pub pop: Array2<f64>,
    pub coords: Array2<f64>,
    pub poi: Array2<f64>,
    pub rank_logits: Array2<f64>,
}

/// Per-term loss values; `total` is their plain sum.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct LossTerms {
    pub total: f64,
    pub mse_pop: f64,
    pub mse_coord: f64,
    pub kl_poi: f64,
    pub ce_rank: f64,
}

impl AutoencoderParams {
    /// Seeded initialization: uniform scaled by fan-in, zero biases.
    pub fn init(cfg: &AeConfig) -> Self {
        let (layout, ids) = ae_layout(cfg.hidden);
        let mut data = vec![0.0; layout.total()];
        let mut rng = stream(cfg.seed, Domain::AutoencoderInit, 0);
        for (id, fan_in) in [
            (ids.enc_w1, FEATURE_DIM),
            (ids.enc_w2, cfg.hidden),
            (ids.dec_w1, EMBED_DIM),
            (ids.pop_w, cfg.hidden),
            (ids.coord_w, cfg.hidden),
            (ids.poi_w, cfg.hidden),
            (ids.rank_w, cfg.hidden),
        ] {
            nn::fill_uniform_fan_in(&mut rng, layout.slice_mut(&mut data, id), fan_in);
        }
        AutoencoderParams { hidden: cfg.hidden, seed: cfg.seed, data, layout, ids }
    }

    fn from_parts(hidden: usize, seed: u64, data: Vec<f64>) -> Result<Self> {
        let (layout, ids) = ae_layout(hidden);
        if data.len() != layout.total() {
            return Err(Error::data(format!(
                "autoencoder checkpoint has {} weights, layout expects {}",
                data.len(),
                layout.total()
            )));
        }
        Ok(AutoencoderParams { hidden, seed, data, layout, ids })
    }

    /// Encode a batch of feature rows (n×38) into embeddings (n×8).
    pub fn encode_batch(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let (l, ids, p) = (&self.layout, &self.ids, self.data.as_slice());
        let mut h = nn::linear(x, &l.mat(p, ids.enc_w1), l.slice(p, ids.enc_b1));
        nn::tanh_inplace(&mut h);
        nn::linear(&h.view(), &l.mat(p, ids.enc_w2), l.slice(p, ids.enc_b2))
    }

    pub fn encode(&self, features: &[f64]) -> [f64; EMBED_DIM] {
        let x = ArrayView2::from_shape((1, FEATURE_DIM), features).expect("feature row length");
        let z = self.encode_batch(&x);
        let mut out = [0.0; EMBED_DIM];
        out.copy_from_slice(z.row(0).as_slice().unwrap());
        out
    }

    /// Decode embeddings (n×8) into the four heads.
    pub fn decode_batch(&self, z: &ArrayView2<f64>) -> DecodedHeads {
        let (l, ids, p) = (&self.layout, &self.ids, self.data.as_slice());
        let mut h = nn::linear(z, &l.mat(p, ids.dec_w1), l.slice(p, ids.dec_b1));
        nn::tanh_inplace(&mut h);
        let hv = h.view();
        let mut pop = nn::linear(&hv, &l.mat(p, ids.pop_w), l.slice(p, ids.pop_b));
        nn::sigmoid_inplace(&mut pop);
        let mut coords = nn::linear(&hv, &l.mat(p, ids.coord_w), l.slice(p, ids.coord_b));
        nn::sigmoid_inplace(&mut coords);
        let mut poi = nn::linear(&hv, &l.mat(p, ids.poi_w), l.slice(p, ids.poi_b));
        nn::softmax_rows(&mut poi);
        let rank_logits = nn::linear(&hv, &l.mat(p, ids.rank_w), l.slice(p, ids.rank_b));
        DecodedHeads { pop, coords, poi, rank_logits }
    }
}

/// Eq.-style composite reconstruction loss for one sample.
///
/// `l` is the 38-dim target row; heads come from [`AutoencoderParams::decode_batch`]
/// row `i`. KL uses natural log; CE is `−log softmax(logits)[rank_class]`.
pub fn reconstruction_loss(
    l: &[f64],
    pop: f64,
    coords: &[f64],
    poi: &[f64],
    rank_logits: &[f64],
    rank_class: u8,
) -> LossTerms {
    let mse_pop = (pop - l[0]).powi(2);
    let mse_coord = (coords[0] - l[36]).powi(2) + (coords[1] - l[37]).powi(2);
    let mut kl_poi = 0.0;
    for (j, &q) in poi.iter().enumerate() {
        let p = l[1 + j];
        if p > 0.0 {
            kl_poi += p * (p.ln() - q.ln());
        }
    }
    let max = rank_logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + rank_logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let ce_rank = lse - rank_logits[rank_class as usize];
    LossTerms {
        total: mse_pop + mse_coord + kl_poi + ce_rank,
        mse_pop,
        mse_coord,
        kl_poi,
        ce_rank,
    }
}

/// Batch forward + loss + parameter gradients. Returns mean loss terms;
/// gradients (d mean-loss / d params) accumulate into `grads`.
fn forward_backward(
    params: &AutoencoderParams,
    x: &ArrayView2<f64>,
    classes: &[u8],
    grads: &mut [f64],
) -> LossTerms {
    let (l, ids) = (&params.layout, &params.ids);
    let p = params.data.as_slice();
    let n = x.dim().0;
    let scale = 1.0 / n as f64;

    // Forward, keeping activations.
    let mut h_enc = nn::linear(x, &l.mat(p, ids.enc_w1), l.slice(p, ids.enc_b1));
    nn::tanh_inplace(&mut h_enc);
    let z = nn::linear(&h_enc.view(), &l.mat(p, ids.enc_w2), l.slice(p, ids.enc_b2));
    let mut h_dec = nn::linear(&z.view(), &l.mat(p, ids.dec_w1), l.slice(p, ids.dec_b1));
    nn::tanh_inplace(&mut h_dec);
    let hv = h_dec.view();
    let mut pop = nn::linear(&hv, &l.mat(p, ids.pop_w), l.slice(p, ids.pop_b));
    nn::sigmoid_inplace(&mut pop);
    let mut coords = nn::linear(&hv, &l.mat(p, ids.coord_w), l.slice(p, ids.coord_b));
    nn::sigmoid_inplace(&mut coords);
    let mut poi = nn::linear(&hv, &l.mat(p, ids.poi_w), l.slice(p, ids.poi_b));
    nn::softmax_rows(&mut poi);
    let rank_logits = nn::linear(&hv, &l.mat(p, ids.rank_w), l.slice(p, ids.rank_b));

    // Loss terms (mean over batch).
    let mut terms = LossTerms::default();
    let mut rank_prob = rank_logits.clone();
    nn::softmax_rows(&mut rank_prob);
    for i in 0..n {
        let t = reconstruction_loss(
            x.row(i).as_slice().unwrap(),
            pop[[i, 0]],
            coords.row(i).as_slice().unwrap(),
            poi.row(i).as_slice().unwrap(),
            rank_logits.row(i).as_slice().unwrap(),
            classes[i],
        );
        terms.total += t.total * scale;
        terms.mse_pop += t.mse_pop * scale;
        terms.mse_coord += t.mse_coord * scale;
        terms.kl_poi += t.kl_poi * scale;
        terms.ce_rank += t.ce_rank * scale;
    }

    // Gradients at the head pre-activations.
    let mut d_pop = Array2::zeros((n, 1));
    let mut d_coord = Array2::zeros((n, 2));
    let mut d_poi = Array2::zeros((n, POI_DIM));
    let mut d_rank = Array2::zeros((n, RANK_CLASSES));
    for i in 0..n {
        let xi = x.row(i);
        let ph = pop[[i, 0]];
        d_pop[[i, 0]] = scale * 2.0 * (ph - xi[0]) * ph * (1.0 - ph);
        for c in 0..2 {
            let ch = coords[[i, c]];
            d_coord[[i, c]] = scale * 2.0 * (ch - xi[36 + c]) * ch * (1.0 - ch);
        }
        for j in 0..POI_DIM {
            d_poi[[i, j]] = scale * (poi[[i, j]] - xi[1 + j]);
        }
        for j in 0..RANK_CLASSES {
            let onehot = (j == classes[i] as usize) as u8 as f64;
            d_rank[[i, j]] = scale * (rank_prob[[i, j]] - onehot);
        }
    }

    // Backward through the decoder heads into the trunk.
    let (dw, db) = nn::grad_pair(l, grads, ids.pop_w, ids.pop_b);
    let mut d_hdec = nn::linear_backward(&hv, &l.mat(p, ids.pop_w), &d_pop.view(), dw, db);
    let (dw, db) = nn::grad_pair(l, grads, ids.coord_w, ids.coord_b);
    d_hdec += &nn::linear_backward(&hv, &l.mat(p, ids.coord_w), &d_coord.view(), dw, db);
    let (dw, db) = nn::grad_pair(l, grads, ids.poi_w, ids.poi_b);
    d_hdec += &nn::linear_backward(&hv, &l.mat(p, ids.poi_w), &d_poi.view(), dw, db);
    let (dw, db) = nn::grad_pair(l, grads, ids.rank_w, ids.rank_b);
    d_hdec += &nn::linear_backward(&hv, &l.mat(p, ids.rank_w), &d_rank.view(), dw, db);
    nn::tanh_backward_inplace(&mut d_hdec, &h_dec);

    let (dw, db) = nn::grad_pair(l, grads, ids.dec_w1, ids.dec_b1);
    let dz = nn::linear_backward(&z.view(), &l.mat(p, ids.dec_w1), &d_hdec.view(), dw, db);
    let (dw, db) = nn::grad_pair(l, grads, ids.enc_w2, ids.enc_b2);
    let mut d_henc = nn::linear_backward(&h_enc.view(), &l.mat(p, ids.enc_w2), &dz.view(), dw, db);
    nn::tanh_backward_inplace(&mut d_henc, &h_enc);
    let (dw, db) = nn::grad_pair(l, grads, ids.enc_w1, ids.enc_b1);
    nn::linear_backward(x, &l.mat(p, ids.enc_w1), &d_henc.view(), dw, db);

    terms
}

/// One row of the per-epoch loss trace.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub total: f64,
    pub mse_pop: f64,
    pub mse_coord: f64,
    pub kl_poi: f64,
    pub ce_rank: f64,
}

/// Train on the pooled rows of all tables. Seeded and bit-reproducible.
pub fn train_autoencoder(
    tables: &[&FeatureTable],
    ae_cfg: &AeConfig,
    cfg: &TrainConfig,
) -> Result<(AutoencoderParams, Vec<TraceRow>)> {
    let n: usize = tables.iter().map(|t| t.len()).sum();
    if n == 0 {
        return Err(Error::data("no feature rows to train on"));
    }
    let mut x = Array2::zeros((n, FEATURE_DIM));
    let mut classes = Vec::with_capacity(n);
    let mut r = 0;
    for t in tables {
        for i in 0..t.len() {
            x.row_mut(r).assign(&ndarray::ArrayView1::from(t.row(i)));
            classes.push(t.rank_class[i]);
            r += 1;
        }
    }

    let mut params = AutoencoderParams::init(ae_cfg);
    let batch = cfg.batch.max(1).min(n);
    let mut opt = nn::Adam::new(params.data.len(), cfg.lr);
    let mut grads = vec![0.0; params.data.len()];
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        let mut rng = stream(cfg.seed, Domain::AutoencoderShuffle, epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_terms = LossTerms::default();
        for chunk in order.chunks(batch) {
            let xb = x.select(Axis(0), chunk);
            let cb: Vec<u8> = chunk.iter().map(|&i| classes[i]).collect();
            grads.fill(0.0);
            let terms = forward_backward(&params, &xb.view(), &cb, &mut grads);
            if !terms.total.is_finite() {
                return Err(Error::numeric(format!(
                    "autoencoder loss diverged at epoch {epoch}: {}",
                    terms.total
                )));
            }
            opt.step(&mut params.data, &grads);
            let w = chunk.len() as f64 / n as f64;
            epoch_terms.total += terms.total * w;
            epoch_terms.mse_pop += terms.mse_pop * w;
            epoch_terms.mse_coord += terms.mse_coord * w;
            epoch_terms.kl_poi += terms.kl_poi * w;
            epoch_terms.ce_rank += terms.ce_rank * w;
        }
        trace.push(TraceRow {
            epoch,
            total: epoch_terms.total,
            mse_pop: epoch_terms.mse_pop,
            mse_coord: epoch_terms.mse_coord,
            kl_poi: epoch_terms.kl_poi,
            ce_rank: epoch_terms.ce_rank,
        });
    }
    Ok((params, trace))
}

/// Max relative error between analytic and central-difference gradients of the
/// single-sample loss, over `n_checks` random parameters.
pub fn finite_diff_check(
    params: &AutoencoderParams,
    l: &[f64],
    rank_class: u8,
    n_checks: usize,
    seed: u64,
) -> f64 {
    let x = Array2::from_shape_vec((1, FEATURE_DIM), l.to_vec()).unwrap();
    let mut grads = vec![0.0; params.data.len()];
    forward_backward(params, &x.view(), &[rank_class], &mut grads);

    let mut rng = stream(seed, Domain::FiniteDiff, 0);
    let total = params.data.len();
    let indices: Vec<usize> = (0..n_checks).map(|_| rng.random_range(0..total)).collect();

    let mut data = params.data.clone();
    let (layout, ids) = (params.layout.clone(), params.ids);
    let hidden = params.hidden;
    let loss = |p: &[f64]| {
        let tmp = AutoencoderParams {
            hidden,
            seed: 0,
            data: p.to_vec(),
            layout: layout.clone(),
            ids,
        };
        let z = tmp.encode_batch(&x.view());
        let heads = tmp.decode_batch(&z.view());
        reconstruction_loss(
            l,
            heads.pop[[0, 0]],
            heads.coords.row(0).as_slice().unwrap(),
            heads.poi.row(0).as_slice().unwrap(),
            heads.rank_logits.row(0).as_slice().unwrap(),
            rank_class,
        )
        .total
    };
    nn::finite_diff_max_rel_err(loss, &mut data, &grads, &indices, 1e-4)
}

// ---------------------------------------------------------------------------
// Persistence

#[derive(Serialize, Deserialize)]
struct AeCheckpoint {
    version: u32,
    hidden: usize,
    seed: u64,
    data: Vec<f64>,
}

pub fn save_autoencoder(path: &Path, params: &AutoencoderParams) -> Result<()> {
    let ck = AeCheckpoint {
        version: 1,
        hidden: params.hidden,
        seed: params.seed,
        data: params.data.clone(),
    };
    std::fs::write(path, serde_json::to_string(&ck)?)?;
    Ok(())
}

pub fn load_autoencoder(path: &Path) -> Result<AutoencoderParams> {
    let ck: AeCheckpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if ck.version != 1 {
        return Err(Error::data(format!("unsupported autoencoder checkpoint version {}", ck.version)));
    }
    AutoencoderParams::from_parts(ck.hidden, ck.seed, ck.data)
}

/// Write the loss trace as `epoch,total,mse_pop,mse_coord,kl_poi,ce_rank`.
pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(e.to_string()))?;
    w.write_record(["epoch", "total", "mse_pop", "mse_coord", "kl_poi", "ce_rank"])
        .map_err(|e| Error::data(e.to_string()))?;
    for r in trace {
        w.write_record([
            r.epoch.to_string(),
            r.total.to_string(),
            r.mse_pop.to_string(),
            r.mse_coord.to_string(),
            r.kl_poi.to_string(),
            r.ce_rank.to_string(),
        ])
        .map_err(|e| Error::data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::NormMeta;

    fn random_feature_row(seed: u64) -> (Vec<f64>, u8) {
        let mut rng = stream(seed, Domain::FixtureCity, 99);
        let mut l = vec![0.0; FEATURE_DIM];
        l[0] = rng.random_range(0.0..1.0);
        let mut total = 0.0;
        for j in 0..POI_DIM {
            l[1 + j] = rng.random_range(0.1..1.0);
            total += l[1 + j];
        }
        for j in 0..POI_DIM {
            l[1 + j] /= total;
        }
        l[35] = rng.random_range(0.0..1.0);
        l[36] = rng.random_range(0.0..1.0);
        l[37] = rng.random_range(0.0..1.0);
        (l, rng.random_range(0..RANK_CLASSES as u8))
    }

    fn tiny_table(rows: usize, seed: u64) -> FeatureTable {
        let mut features = Vec::new();
        let mut rank_class = Vec::new();
        for i in 0..rows {
            let (l, c) = random_feature_row(seed * 1000 + i as u64);
            features.push(l);
            rank_class.push(c);
        }
        FeatureTable {
            features,
            rank_class,
            norm: NormMeta { pop_log_min: 0.0, pop_log_max: 1.0, rank_edges: vec![] },
        }
    }

    #[test]
    fn encode_is_deterministic_8dim() {
        let p = AutoencoderParams::init(&AeConfig::default());
        let (l, _) = random_feature_row(1);
        let z1 = p.encode(&l);
        let z2 = p.encode(&l);
        assert_eq!(z1, z2);
        assert!(z1.iter().all(|v| v.is_finite()));
        assert_eq!(z1.len(), EMBED_DIM);
    }

    #[test]
    fn decode_heads_are_squashed() {
        let p = AutoencoderParams::init(&AeConfig::default());
        let z = Array2::from_shape_vec((1, 8), vec![0.3, -1.0, 2.0, 0.0, 0.5, -0.5, 1.5, -2.0]).unwrap();
        let heads = p.decode_batch(&z.view());
        assert!((heads.poi.row(0).sum() - 1.0).abs() < 1e-9);
        assert!(heads.pop[[0, 0]] > 0.0 && heads.pop[[0, 0]] < 1.0);
        assert!(heads.coords.iter().all(|&c| (0.0..=1.0).contains(&c)));
        let again = p.decode_batch(&z.view());
        assert_eq!(heads.rank_logits, again.rank_logits);
    }

    #[test]
    fn perfect_reconstruction_loss_is_zero() {
        // Build a target from the decoder's own output: every term collapses.
        let p = AutoencoderParams::init(&AeConfig::default());
        let z = Array2::zeros((1, 8));
        let heads = p.decode_batch(&z.view());
        let mut l = vec![0.0; FEATURE_DIM];
        l[0] = heads.pop[[0, 0]];
        for j in 0..POI_DIM {
            l[1 + j] = heads.poi[[0, j]];
        }
        l[36] = heads.coords[[0, 0]];
        l[37] = heads.coords[[0, 1]];
        let mut logits = vec![0.0; RANK_CLASSES];
        logits[3] = 10.0;
        let t = reconstruction_loss(
            &l,
            heads.pop[[0, 0]],
            heads.coords.row(0).as_slice().unwrap(),
            heads.poi.row(0).as_slice().unwrap(),
            &logits,
            3,
        );
        assert_eq!(t.mse_pop, 0.0);
        assert_eq!(t.mse_coord, 0.0);
        assert!(t.kl_poi.abs() < 1e-12);
        assert!(t.ce_rank < 1e-3, "ce = {}", t.ce_rank);
    }

    #[test]
    fn uniform_poi_kl_is_exactly_zero() {
        let mut l = vec![0.0; FEATURE_DIM];
        for j in 0..POI_DIM {
            l[1 + j] = 1.0 / POI_DIM as f64;
        }
        let poi = vec![1.0 / POI_DIM as f64; POI_DIM];
        let t = reconstruction_loss(&l, 0.0, &[0.0, 0.0], &poi, &vec![0.0; RANK_CLASSES], 0);
        assert_eq!(t.kl_poi, 0.0);
    }

    #[test]
    fn pop_half_vs_zero_gives_quarter() {
        let mut l = vec![0.0; FEATURE_DIM];
        l[0] = 0.5;
        for j in 0..POI_DIM {
            l[1 + j] = 1.0 / POI_DIM as f64;
        }
        let poi = vec![1.0 / POI_DIM as f64; POI_DIM];
        let t = reconstruction_loss(&l, 0.0, &[0.0, 0.0], &poi, &vec![0.0; RANK_CLASSES], 0);
        assert_eq!(t.mse_pop, 0.25);
    }

    #[test]
    fn training_reduces_loss_and_is_seeded() {
        let table = tiny_table(64, 7);
        let cfg = TrainConfig { lr: 1e-2, batch: 16, epochs: 30, seed: 42 };
        let (p1, trace1) = train_autoencoder(&[&table], &AeConfig::default(), &cfg).unwrap();
        let (p2, trace2) = train_autoencoder(&[&table], &AeConfig::default(), &cfg).unwrap();
        assert!(trace1.last().unwrap().total < trace1[0].total);
        assert_eq!(p1.data, p2.data);
        assert_eq!(trace1.last().unwrap().total, trace2.last().unwrap().total);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p = AutoencoderParams::init(&AeConfig { hidden: 64, seed: 3 });
        let (l, c) = random_feature_row(5);
        let err = finite_diff_check(&p, &l, c, 250, 11);
        assert!(err < 1e-4, "max rel err = {err}");
    }

    #[test]
    fn gradients_are_pure_and_input_sensitive() {
        let p = AutoencoderParams::init(&AeConfig::default());
        let (l, c) = random_feature_row(6);
        let x = Array2::from_shape_vec((1, FEATURE_DIM), l.clone()).unwrap();
        let mut g1 = vec![0.0; p.data.len()];
        let mut g2 = vec![0.0; p.data.len()];
        forward_backward(&p, &x.view(), &[c], &mut g1);
        forward_backward(&p, &x.view(), &[c], &mut g2);
        assert_eq!(g1, g2);

        let doubled: Vec<f64> = l.iter().map(|v| v * 2.0).collect();
        let xd = Array2::from_shape_vec((1, FEATURE_DIM), doubled).unwrap();
        let mut g3 = vec![0.0; p.data.len()];
        forward_backward(&p, &xd.view(), &[c], &mut g3);
        assert_ne!(g1, g3);
    }

    #[test]
    fn checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ae.json");
        let p = AutoencoderParams::init(&AeConfig { hidden: 32, seed: 9 });
        save_autoencoder(&path, &p).unwrap();
        let q = load_autoencoder(&path).unwrap();
        assert_eq!(p.data, q.data);
        assert_eq!(q.hidden, 32);
    }
}
