//! Membership-inference audit: can a binary classifier tell training-set
//! trajectories from synthetic ones? Accuracy near 0.5 means the generator
//! does not leak its training data sample-by-sample.
//!
//! Three native classifier families stand in for the usual LR / SVM / RF
//! trio; the SVM slot is a linear hinge-loss model trained by stochastic
//! subgradient, so no external solver is involved.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoencoder::AutoencoderParams;
use crate::codec::{dense_day, Trajectory};
use crate::diffusion::StandardizationStats;
use crate::error::{Error, Result};
use crate::features::FeatureTable;
use crate::geo::{haversine_km, CityGrid};
use crate::rng::{stream, Domain};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const ATTACK_DIM: usize = 14;

/// Per-trajectory attack features:
/// `[r_g, total_distance, S_d, n_stays, mean_dt, top_share, emb_mean[8]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackFeatures(pub [f64; ATTACK_DIM]);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackFamily {
    Logistic,
    Forest,
    LinearMargin,
}

impl AttackFamily {
    pub fn name(self) -> &'static str {
        match self {
            AttackFamily::Logistic => "logistic",
            AttackFamily::Forest => "forest",
            AttackFamily::LinearMargin => "linear-margin",
        }
    }

    pub const ALL: [AttackFamily; 3] =
        [AttackFamily::Logistic, AttackFamily::Forest, AttackFamily::LinearMargin];
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackResult {
    pub family: String,
    pub accuracy: f64,
    pub seed: u64,
}

fn summarize(t: &Trajectory, grid: &CityGrid, emb_of: impl Fn(u32) -> [f64; 8]) -> Result<AttackFeatures> {
    let dense = dense_day(t).ok_or_else(|| Error::data(format!("empty trajectory {}", t.user_id)))?;

    let pts: Vec<(f64, f64)> = dense.iter().map(|&l| grid.xy_km(l)).collect();
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |(x, y), p| (x + p.0, y + p.1));
    let (mx, my) = (mx / n, my / n);
    let ss: f64 = pts.iter().map(|p| (p.0 - mx).powi(2) + (p.1 - my).powi(2)).sum();
    let r_g = (ss / n).sqrt();

    let mut stays: Vec<(u32, u32)> = Vec::new();
    for &loc in &dense {
        match stays.last_mut() {
            Some(s) if s.0 == loc => s.1 += 1,
            _ => stays.push((loc, 1)),
        }
    }
    let total_dist: f64 = stays
        .windows(2)
        .map(|w| haversine_km(grid.locations[w[0].0 as usize].center, grid.locations[w[1].0 as usize].center))
        .sum();
    let mut distinct: Vec<u32> = stays.iter().map(|s| s.0).collect();
    distinct.sort_unstable();
    distinct.dedup();
    let top_count = distinct
        .iter()
        .map(|&d| stays.iter().filter(|s| s.0 == d).count())
        .max()
        .unwrap_or(0);
    let n_stays = stays.len() as f64;
    let top_share = top_count as f64 / n_stays;
    let mean_dt = 24.0 / n_stays;

    let mut emb_mean = [0.0f64; 8];
    for &(loc, slots) in &stays {
        let e = emb_of(loc);
        for (m, v) in emb_mean.iter_mut().zip(e) {
            *m += slots as f64 * v;
        }
    }
    for m in emb_mean.iter_mut() {
        *m /= dense.len() as f64;
    }

    let mut f = [0.0; ATTACK_DIM];
    f[0] = r_g;
    f[1] = total_dist;
    f[2] = distinct.len() as f64;
    f[3] = n_stays;
    f[4] = mean_dt;
    f[5] = top_share;
    f[6..].copy_from_slice(&emb_mean);
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite attack feature"));
    }
    Ok(AttackFeatures(f))
}

/// 14-dim summary of one trajectory; embeddings are standardized with the
/// diffusion training stats so the attack sees the generator's own space.
pub fn featurize_for_attack(
    t: &Trajectory,
    grid: &CityGrid,
    table: &FeatureTable,
    ae: &AutoencoderParams,
    stats: &StandardizationStats,
) -> Result<AttackFeatures> {
    summarize(t, grid, |loc| {
        let mut e = ae.encode(table.row(loc as usize));
        for (v, (m, s)) in e.iter_mut().zip(stats.mean.iter().zip(&stats.std)) {
            *v = (*v - m) / s;
        }
        e
    })
}

/// Featurize a whole corpus, encoding each location once.
pub fn featurize_corpus(
    trajectories: &[Trajectory],
    grid: &CityGrid,
    table: &FeatureTable,
    ae: &AutoencoderParams,
    stats: &StandardizationStats,
) -> Result<Vec<AttackFeatures>> {
    let mut emb = crate::codec::location_embeddings(ae, table);
    stats.standardize_inplace(&mut emb);
    trajectories
        .iter()
        .map(|t| {
            summarize(t, grid, |loc| {
                let mut e = [0.0; 8];
                e.copy_from_slice(emb.row(loc as usize).as_slice().expect("contiguous row"));
                e
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Attack harness

struct Split {
    x_train: Array2<f64>,
    y_train: Vec<u8>,
    x_eval: Array2<f64>,
    y_eval: Vec<u8>,
}

/// Balance by subsampling the larger class, then split 70/30 per class and
/// standardize with train-set statistics.
fn prepare(real: &[AttackFeatures], synthetic: &[AttackFeatures], seed: u64) -> Result<Split> {
    let n = real.len().min(synthetic.len());
    if n < 100 {
        return Err(Error::data(format!("membership inference needs ≥100 samples per class, got {n}")));
    }
    let n_eval = (3 * n) / 10;

    let mut rows_train: Vec<(&AttackFeatures, u8)> = Vec::new();
    let mut rows_eval: Vec<(&AttackFeatures, u8)> = Vec::new();
    for (class, set) in [(1u8, real), (0u8, synthetic)] {
        // equal-size classes share one permutation (a paired split): when the
        // synthetic set contains copies of real rows, a duplicate must never
        // sit in eval for one class and in train with the opposite label for
        // the other, or the control drifts below chance
        let stream_idx = if real.len() == synthetic.len() { 0 } else { class as u64 };
        let mut idx: Vec<usize> = (0..set.len()).collect();
        idx.shuffle(&mut stream(seed, Domain::PrivacySplit, stream_idx));
        for (k, &i) in idx.iter().take(n).enumerate() {
            if k < n_eval {
                rows_eval.push((&set[i], class));
            } else {
                rows_train.push((&set[i], class));
            }
        }
    }

    let pack = |rows: &[(&AttackFeatures, u8)]| -> (Array2<f64>, Vec<u8>) {
        let mut x = Array2::zeros((rows.len(), ATTACK_DIM));
        let mut y = Vec::with_capacity(rows.len());
        for (r, (f, c)) in rows.iter().enumerate() {
            for (j, &v) in f.0.iter().enumerate() {
                x[[r, j]] = v;
            }
            y.push(*c);
        }
        (x, y)
    };
    let (mut x_train, y_train) = pack(&rows_train);
    let (mut x_eval, y_eval) = pack(&rows_eval);

    let rows = x_train.nrows() as f64;
    for j in 0..ATTACK_DIM {
        let mean = x_train.column(j).sum() / rows;
        let var = x_train.column(j).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / rows;
        let sd = var.sqrt().max(1e-9);
        for v in x_train.column_mut(j) {
            *v = (*v - mean) / sd;
        }
        for v in x_eval.column_mut(j) {
            *v = (*v - mean) / sd;
        }
    }
    Ok(Split { x_train, y_train, x_eval, y_eval })
}

fn accuracy(pred: &[u8], truth: &[u8]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len() as f64
}

// --- logistic regression, full-batch gradient descent ---

fn train_logistic(x: &ArrayView2<f64>, y: &[u8]) -> Vec<f64> {
    let (n, d) = (x.nrows(), x.ncols());
    let mut w = vec![0.0f64; d + 1];
    let lr = 0.5;
    let l2 = 1e-4;
    for _ in 0..400 {
        let mut grad = vec![0.0f64; d + 1];
        for (i, row) in x.rows().into_iter().enumerate() {
            let z: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + w[d];
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - y[i] as f64;
            for (g, &v) in grad.iter_mut().zip(row) {
                *g += err * v;
            }
            grad[d] += err;
        }
        for (j, g) in grad.iter().enumerate() {
            let reg = if j < d { l2 * w[j] } else { 0.0 };
            w[j] -= lr * (g / n as f64 + reg);
        }
    }
    w
}

fn predict_linear(w: &[f64], x: &ArrayView2<f64>) -> Vec<u8> {
    let d = x.ncols();
    x.rows()
        .into_iter()
        .map(|row| {
            let z: f64 = row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + w[d];
            u8::from(z > 0.0)
        })
        .collect()
}

// --- linear hinge-loss classifier, stochastic subgradient (pegasos-style) ---

fn train_hinge(x: &ArrayView2<f64>, y: &[u8], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (n, d) = (x.nrows(), x.ncols());
    let lambda = 1e-3;
    let epochs = 30usize;
    let burn_in = 5 * n;
    let mut w = vec![0.0f64; d + 1];
    let mut w_avg = vec![0.0f64; d + 1];
    let mut averaged = 0usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut t = 0usize;
    for _ in 0..epochs {
        order.shuffle(rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let yi = if y[i] == 1 { 1.0 } else { -1.0 };
            let row = x.row(i);
            let z: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + w[d];
            for wj in w.iter_mut().take(d) {
                *wj *= 1.0 - eta * lambda;
            }
            if yi * z < 1.0 {
                for (wj, &v) in w.iter_mut().zip(row) {
                    *wj += eta * yi * v;
                }
                w[d] += eta * yi;
            }
            // the raw last iterate oscillates; an averaged iterate is stable
            if t > burn_in {
                for (a, &v) in w_avg.iter_mut().zip(&w) {
                    *a += v;
                }
                averaged += 1;
            }
        }
    }
    for a in w_avg.iter_mut() {
        *a /= averaged.max(1) as f64;
    }
    w_avg
}

// --- random forest: bagged depth-limited trees ---

const N_TREES: usize = 100;
const MAX_DEPTH: usize = 8;
const MIN_LEAF: usize = 8;
const FEATURES_PER_SPLIT: usize = 4;

enum TreeNode {
    Leaf(u8),
    Split { feat: usize, thr: f64, left: usize, right: usize },
}

fn majority(y: &[u8], idx: &[usize]) -> u8 {
    let ones = idx.iter().filter(|&&i| y[i] == 1).count();
    // deterministic tie-break toward class 0
    u8::from(2 * ones > idx.len())
}

fn grow(
    nodes: &mut Vec<TreeNode>,
    x: &ArrayView2<f64>,
    y: &[u8],
    idx: &mut Vec<usize>,
    depth: usize,
    rng: &mut ChaCha8Rng,
) -> usize {
    let ones = idx.iter().filter(|&&i| y[i] == 1).count();
    if depth >= MAX_DEPTH || idx.len() < MIN_LEAF || ones == 0 || ones == idx.len() {
        nodes.push(TreeNode::Leaf(majority(y, idx)));
        return nodes.len() - 1;
    }

    let mut feats: Vec<usize> = (0..ATTACK_DIM).collect();
    feats.shuffle(rng);
    feats.truncate(FEATURES_PER_SPLIT);

    let parent = idx.len() as f64;
    let mut best: Option<(f64, usize, f64)> = None; // (gini, feat, thr)
    let mut vals: Vec<(f64, u8)> = Vec::with_capacity(idx.len());
    for &f in &feats {
        vals.clear();
        vals.extend(idx.iter().map(|&i| (x[[i, f]], y[i])));
        vals.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total_ones = ones as f64;
        let (mut l_n, mut l_ones) = (0.0f64, 0.0f64);
        for k in 0..vals.len() - 1 {
            l_n += 1.0;
            l_ones += vals[k].1 as f64;
            if vals[k].0 == vals[k + 1].0 {
                continue;
            }
            let r_n = parent - l_n;
            let r_ones = total_ones - l_ones;
            let gini_side = |n: f64, o: f64| {
                let p = o / n;
                2.0 * p * (1.0 - p) * n / parent
            };
            let g = gini_side(l_n, l_ones) + gini_side(r_n, r_ones);
            let thr = 0.5 * (vals[k].0 + vals[k + 1].0);
            if best.is_none_or(|b| g < b.0) {
                best = Some((g, f, thr));
            }
        }
    }

    let Some((_, feat, thr)) = best else {
        nodes.push(TreeNode::Leaf(majority(y, idx)));
        return nodes.len() - 1;
    };
    let mut left_idx: Vec<usize> = idx.iter().copied().filter(|&i| x[[i, feat]] <= thr).collect();
    let mut right_idx: Vec<usize> = idx.iter().copied().filter(|&i| x[[i, feat]] > thr).collect();
    let left = grow(nodes, x, y, &mut left_idx, depth + 1, rng);
    let right = grow(nodes, x, y, &mut right_idx, depth + 1, rng);
    nodes.push(TreeNode::Split { feat, thr, left, right });
    nodes.len() - 1
}

fn tree_predict(nodes: &[TreeNode], root: usize, row: &[f64]) -> u8 {
    let mut k = root;
    loop {
        match &nodes[k] {
            TreeNode::Leaf(c) => return *c,
            TreeNode::Split { feat, thr, left, right } => {
                k = if row[*feat] <= *thr { *left } else { *right };
            }
        }
    }
}

fn forest_predict(x_train: &ArrayView2<f64>, y_train: &[u8], x_eval: &ArrayView2<f64>, seed: u64) -> Vec<u8> {
    let n = x_train.nrows();
    let votes: Vec<Vec<u8>> = (0..N_TREES)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream(seed, Domain::PrivacyModel, 100 + t as u64);
            let mut idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let mut nodes = Vec::new();
            let root = grow(&mut nodes, x_train, y_train, &mut idx, 0, &mut rng);
            x_eval
                .rows()
                .into_iter()
                .map(|row| tree_predict(&nodes, root, row.as_slice().expect("contiguous row")))
                .collect()
        })
        .collect();
    (0..x_eval.nrows())
        .map(|i| {
            let ones: usize = votes.iter().map(|v| v[i] as usize).sum();
            // deterministic tie-break toward class 0
            u8::from(2 * ones > N_TREES)
        })
        .collect()
}

/// Train one attack family on a balanced 70/30 split and report held-out
/// accuracy. Class 1 = real (training) trajectories, class 0 = synthetic.
pub fn run_membership_inference(
    real: &[AttackFeatures],
    synthetic: &[AttackFeatures],
    family: AttackFamily,
    seed: u64,
) -> Result<AttackResult> {
    let split = prepare(real, synthetic, seed)?;
    let pred = match family {
        AttackFamily::Logistic => {
            let w = train_logistic(&split.x_train.view(), &split.y_train);
            predict_linear(&w, &split.x_eval.view())
        }
        AttackFamily::LinearMargin => {
            let mut rng = stream(seed, Domain::PrivacyModel, 2);
            let w = train_hinge(&split.x_train.view(), &split.y_train, &mut rng);
            predict_linear(&w, &split.x_eval.view())
        }
        AttackFamily::Forest => {
            forest_predict(&split.x_train.view(), &split.y_train, &split.x_eval.view(), seed)
        }
    };
    Ok(AttackResult { family: family.name().to_string(), accuracy: accuracy(&pred, &split.y_eval), seed })
}

/// Append-style results CSV: `city,family,accuracy,seed`.
pub fn write_attack_csv(path: &Path, city: &str, results: &[AttackResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(e.to_string()))?;
    w.write_record(["city", "family", "accuracy", "seed"]).map_err(|e| Error::data(e.to_string()))?;
    for r in results {
        w.write_record([city, &r.family, &format!("{:.4}", r.accuracy), &r.seed.to_string()])
            .map_err(|e| Error::data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::data(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::AeConfig;
    use crate::features::assemble_features;
    use crate::geo::{build_grid, load_boundary};
    use crate::POI_DIM;
    use rand_distr::StandardNormal;

    fn square_city() -> (CityGrid, FeatureTable, AutoencoderParams, StandardizationStats) {
        let geojson = r#"{
            "type": "FeatureCollection",
            "features": [{
                "type": "Feature",
                "properties": {"name": "square"},
                "geometry": {"type": "Polygon", "coordinates": [[
                    [0.0, 0.0], [0.0542, 0.0], [0.0542, 0.0542], [0.0, 0.0542], [0.0, 0.0]
                ]]}
            }]
        }"#;
        let grid = build_grid(&load_boundary(geojson).unwrap(), 1000.0).unwrap();
        let m = grid.len();
        let pop: Vec<f64> = (0..m).map(|i| 10.0 + i as f64).collect();
        let poi = vec![vec![1.0 / POI_DIM as f64; POI_DIM]; m];
        let table = assemble_features(&grid, &pop, &poi, &vec![0.5; m], &vec![0u8; m]).unwrap();
        let ae = AutoencoderParams::init(&AeConfig { hidden: 64, seed: 3 });
        let stats = StandardizationStats { mean: vec![0.0; 8], std: vec![1.0; 8] };
        (grid, table, ae, stats)
    }

    fn traj(id: &str, tokens: &[(u8, u32)]) -> Trajectory {
        Trajectory { user_id: id.into(), tokens: tokens.to_vec(), day_of_week: 0 }
    }

    #[test]
    fn stationary_features() {
        let (grid, table, ae, stats) = square_city();
        let f = featurize_for_attack(&traj("u1", &[(0, 7)]), &grid, &table, &ae, &stats).unwrap();
        assert_eq!(f.0.len(), ATTACK_DIM);
        assert_eq!(f.0[0], 0.0); // r_g
        assert_eq!(f.0[1], 0.0); // distance
        assert_eq!(f.0[2], 1.0); // S_d
        assert_eq!(f.0[3], 1.0); // stays
        assert_eq!(f.0[4], 24.0); // mean dwell
        assert_eq!(f.0[5], 1.0); // top share
        assert!(f.0.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn featurize_is_deterministic_and_matches_corpus_path() {
        let (grid, table, ae, stats) = square_city();
        let ts = vec![traj("u1", &[(0, 0), (10, 5), (30, 0)]), traj("u2", &[(0, 3), (24, 8)])];
        let a1 = featurize_for_attack(&ts[0], &grid, &table, &ae, &stats).unwrap();
        let a2 = featurize_for_attack(&ts[0], &grid, &table, &ae, &stats).unwrap();
        assert_eq!(a1, a2);
        let batch = featurize_corpus(&ts, &grid, &table, &ae, &stats).unwrap();
        for (single, b) in ts.iter().map(|t| featurize_for_attack(t, &grid, &table, &ae, &stats).unwrap()).zip(&batch)
        {
            for (x, y) in single.0.iter().zip(&b.0) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    fn gaussian_features(n: usize, shift: f64, seed: u64) -> Vec<AttackFeatures> {
        let mut rng = stream(seed, Domain::PrivacyModel, 999);
        (0..n)
            .map(|_| {
                let mut f = [0.0; ATTACK_DIM];
                for v in f.iter_mut() {
                    let g: f64 = rng.sample(StandardNormal);
                    *v = g + shift;
                }
                AttackFeatures(f)
            })
            .collect()
    }

    #[test]
    fn identical_sets_are_indistinguishable() {
        let real = gaussian_features(1000, 0.0, 1);
        let copies = real.clone();
        for family in AttackFamily::ALL {
            let r = run_membership_inference(&real, &copies, family, 7).unwrap();
            assert!(
                (r.accuracy - 0.5).abs() <= 0.05,
                "{}: accuracy {} on exact copies",
                r.family,
                r.accuracy
            );
        }
    }

    #[test]
    fn huge_shift_is_fully_detectable() {
        let real = gaussian_features(600, 0.0, 2);
        let shifted = gaussian_features(600, 10.0, 3);
        for family in AttackFamily::ALL {
            let r = run_membership_inference(&real, &shifted, family, 7).unwrap();
            assert!(r.accuracy > 0.95, "{}: accuracy {}", r.family, r.accuracy);
        }
    }

    #[test]
    fn label_shuffle_stays_near_chance() {
        // two independent draws from one distribution = shuffled labels
        let a = gaussian_features(1000, 0.0, 4);
        let b = gaussian_features(1000, 0.0, 5);
        for family in AttackFamily::ALL {
            let r = run_membership_inference(&a, &b, family, 11).unwrap();
            assert!(
                (0.45..=0.55).contains(&r.accuracy),
                "{}: accuracy {} on label-shuffled data",
                r.family,
                r.accuracy
            );
        }
    }

    #[test]
    fn logistic_accuracy_is_monotone_in_shift() {
        let real = gaussian_features(1000, 0.0, 6);
        let mut last = 0.0;
        for (k, shift) in [0.5, 1.0, 2.0].iter().enumerate() {
            let synth = gaussian_features(1000, *shift, 7 + k as u64);
            let r = run_membership_inference(&real, &synth, AttackFamily::Logistic, 13).unwrap();
            assert!(r.accuracy >= last, "shift {shift}: {} < {last}", r.accuracy);
            last = r.accuracy;
        }
    }

    #[test]
    fn seeded_runs_are_reproducible() {
        let real = gaussian_features(400, 0.0, 8);
        let synth = gaussian_features(400, 0.3, 9);
        for family in AttackFamily::ALL {
            let a = run_membership_inference(&real, &synth, family, 21).unwrap();
            let b = run_membership_inference(&real, &synth, family, 21).unwrap();
            assert_eq!(a.accuracy, b.accuracy, "{}", a.family);
        }
    }

    #[test]
    fn small_samples_are_rejected() {
        let a = gaussian_features(50, 0.0, 10);
        assert!(run_membership_inference(&a, &a, AttackFamily::Logistic, 1).is_err());
    }

    #[test]
    fn results_csv_layout() {
        let results = vec![AttackResult { family: "logistic".into(), accuracy: 0.52, seed: 7 }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("attack.csv");
        write_attack_csv(&path, "cityA", &results).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("city,family,accuracy,seed\n"));
        assert!(text.contains("cityA,logistic,0.5200,7"));
    }
}
