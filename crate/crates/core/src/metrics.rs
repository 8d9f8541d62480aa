//! Validation statistics: per-trajectory mobility metrics, distribution
//! divergences, flow agreement, mobility-law exponent fits, and motif
//! distributions, reported in the familiar four-column layout
//! (Radius, Distance, Duration, DailyLoc).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{dense_day, Trajectory};
use crate::error::{Error, Result};
use crate::features::ODMatrix;
use crate::geo::{haversine_km, CityGrid};

/// Pooled raw samples of the five mobility metrics. All vectors are sorted
/// ascending so the result is independent of trajectory order.
#[derive(Debug, Clone, Default)]
pub struct MobilitySamples {
    /// Great-circle km between consecutive distinct stops (per transition).
    pub jump_lengths: Vec<f64>,
    /// Radius of gyration in km, one per user (days pooled).
    pub gyration_radii: Vec<f64>,
    /// Stay durations in hours (runs × 0.5), per stay.
    pub waiting_times: Vec<f64>,
    /// Total distance travelled per user-day, km.
    pub daily_distances: Vec<f64>,
    /// Distinct locations per user-day.
    pub daily_locations: Vec<f64>,
}

/// Multi-day users carry a `_d<n>` suffix per day; the base id groups them.
fn user_key(id: &str) -> &str {
    if let Some(pos) = id.rfind("_d") {
        if id[pos + 2..].chars().all(|c| c.is_ascii_digit()) && pos + 2 < id.len() {
            return &id[..pos];
        }
    }
    id
}

/// Maximal runs of identical locations in a dense day: (location, slots).
fn runs(dense: &[u32]) -> Vec<(u32, u32)> {
    let mut out: Vec<(u32, u32)> = Vec::new();
    for &loc in dense {
        match out.last_mut() {
            Some(r) if r.0 == loc => r.1 += 1,
            _ => out.push((loc, 1)),
        }
    }
    out
}

/// Compute the five mobility metrics for a trajectory corpus.
///
/// Jumps and daily distances use great-circle distance between cell centres;
/// the gyration radius uses the projected plane so the centroid is
/// well-defined. Days are expanded to 48 slots before measuring stays.
pub fn trajectory_statistics(trajectories: &[Trajectory], grid: &CityGrid) -> MobilitySamples {
    let mut s = MobilitySamples::default();
    let mut positions: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();

    for t in trajectories {
        let Some(dense) = dense_day(t) else { continue };
        let stays = runs(&dense);

        for &(_, len) in &stays {
            s.waiting_times.push(len as f64 * 0.5);
        }
        let mut r_w = 0.0;
        for w in stays.windows(2) {
            let (a, b) = (w[0].0, w[1].0);
            let d = haversine_km(grid.locations[a as usize].center, grid.locations[b as usize].center);
            s.jump_lengths.push(d);
            r_w += d;
        }
        s.daily_distances.push(r_w);
        let mut distinct: Vec<u32> = stays.iter().map(|r| r.0).collect();
        distinct.sort_unstable();
        distinct.dedup();
        s.daily_locations.push(distinct.len() as f64);

        let user = positions.entry(user_key(&t.user_id)).or_default();
        for &loc in &dense {
            user.push(grid.xy_km(loc));
        }
    }

    for pts in positions.values() {
        let n = pts.len() as f64;
        let (mx, my) = pts.iter().fold((0.0, 0.0), |(x, y), p| (x + p.0, y + p.1));
        let (mx, my) = (mx / n, my / n);
        let ss: f64 = pts.iter().map(|p| (p.0 - mx).powi(2) + (p.1 - my).powi(2)).sum();
        s.gyration_radii.push((ss / n).sqrt());
    }

    for v in [
        &mut s.jump_lengths,
        &mut s.gyration_radii,
        &mut s.waiting_times,
        &mut s.daily_distances,
        &mut s.daily_locations,
    ] {
        v.sort_by(f64::total_cmp);
    }
    s
}

// ---------------------------------------------------------------------------
// Divergence kernels

/// Jensen-Shannon divergence with base-2 logs, so the range is [0, 1].
/// Both vectors must share a support (same length) and each sum to 1.
pub fn jsd(d1: &[f64], d2: &[f64]) -> Result<f64> {
    if d1.len() != d2.len() {
        return Err(Error::data(format!("jsd support mismatch: {} vs {}", d1.len(), d2.len())));
    }
    let kl_to_mid = |p: &[f64], q: &[f64]| -> f64 {
        p.iter()
            .zip(q)
            .map(|(&a, &b)| {
                let m = 0.5 * (a + b);
                if a > 0.0 {
                    a * (a / m).log2()
                } else {
                    0.0
                }
            })
            .sum()
    };
    Ok((0.5 * kl_to_mid(d1, d2) + 0.5 * kl_to_mid(d2, d1)).clamp(0.0, 1.0))
}

/// Two-sample Kolmogorov-Smirnov statistic: sup |F₁ − F₂| over pooled points.
pub fn ks_statistic(s1: &[f64], s2: &[f64]) -> Result<f64> {
    if s1.is_empty() || s2.is_empty() {
        return Err(Error::data("ks statistic needs non-empty samples"));
    }
    let mut a = s1.to_vec();
    let mut b = s2.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => break,
        };
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        let gap = (i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs();
        d = d.max(gap);
    }
    Ok(d)
}

/// Common part of commuters with the factor-2 normalization, so identical
/// flows score exactly 1. Two all-zero matrices compare as identical.
pub fn cpc(obs: &ODMatrix, gen: &ODMatrix) -> Result<f64> {
    if obs.dim != gen.dim {
        return Err(Error::data(format!("cpc dimension mismatch: {} vs {}", obs.dim, gen.dim)));
    }
    let common: f64 = obs.flows.iter().zip(&gen.flows).map(|(&a, &b)| a.min(b)).sum();
    let denom = obs.total() + gen.total();
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((2.0 * common / denom).clamp(0.0, 1.0))
}

/// Root-mean-square flow error, mean over all m² ordered location pairs.
pub fn flow_rmse(obs: &ODMatrix, gen: &ODMatrix) -> Result<f64> {
    if obs.dim != gen.dim {
        return Err(Error::data(format!("rmse dimension mismatch: {} vs {}", obs.dim, gen.dim)));
    }
    let n = (obs.dim * obs.dim) as f64;
    let ss: f64 = obs.flows.iter().zip(&gen.flows).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok((ss / n).sqrt())
}

// ---------------------------------------------------------------------------
// Histogram helpers (shared binning for JSD columns)

/// 32 log-spaced bin edges spanning the pooled positive range of both sample
/// sets; samples at or below the lowest edge fall into bin 0.
pub fn shared_log_histograms(s1: &[f64], s2: &[f64], bins: usize) -> (Vec<f64>, Vec<f64>) {
    let pos: Vec<f64> = s1.iter().chain(s2).copied().filter(|&v| v > 0.0).collect();
    if pos.is_empty() {
        // both all-zero: identical degenerate distributions
        return (vec![1.0], vec![1.0]);
    }
    let lo = pos.iter().cloned().fold(f64::INFINITY, f64::min).max(1e-9);
    let hi = pos.iter().cloned().fold(0.0f64, f64::max);
    let hi = if hi <= lo { lo * 10.0 } else { hi };
    let (lln, lhn) = (lo.ln(), hi.ln());
    let assign = |v: f64| -> usize {
        if v <= lo {
            return 0;
        }
        let f = (v.ln() - lln) / (lhn - lln);
        ((f * bins as f64) as usize).min(bins - 1)
    };
    let hist = |s: &[f64]| -> Vec<f64> {
        let mut h = vec![0.0; bins];
        for &v in s {
            h[assign(v)] += 1.0;
        }
        let total: f64 = h.iter().sum();
        if total > 0.0 {
            h.iter_mut().for_each(|c| *c /= total);
        }
        h
    };
    (hist(s1), hist(s2))
}

/// Integer-bin histograms over the pooled range 1..=max (for S_d counts).
pub fn shared_integer_histograms(s1: &[f64], s2: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let max = s1.iter().chain(s2).fold(1.0f64, |m, &v| m.max(v)) as usize;
    let hist = |s: &[f64]| -> Vec<f64> {
        let mut h = vec![0.0; max];
        for &v in s {
            let k = (v.round() as usize).clamp(1, max);
            h[k - 1] += 1.0;
        }
        let total: f64 = h.iter().sum();
        if total > 0.0 {
            h.iter_mut().for_each(|c| *c /= total);
        }
        h
    };
    (hist(s1), hist(s2))
}

// ---------------------------------------------------------------------------
// Power-law fitting

/// Truncated power-law fit p(x) ∝ (x+Δr₀)^{−γ}·exp(−x/κ); the waiting form
/// is the κ→∞ branch (κ stored as infinity).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub gamma: f64,
    pub kappa: f64,
    pub x0: f64,
    pub log_likelihood: f64,
}

/// Which marginal is being fitted; `Waiting` selects the pure-power-law
/// branch with slot-resolution continuity correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitForm {
    Jump,
    Gyration,
    Waiting,
}

fn golden_min(mut a: f64, mut b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    const PHI: f64 = 0.618_033_988_749_894_8;
    let mut c = b - PHI * (b - a);
    let mut d = a + PHI * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..70 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + PHI * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

fn simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson(f, a, m, fa, flm, fm, tol / 2.0, depth - 1) + simpson(f, m, b, fm, frm, fb, tol / 2.0, depth - 1)
}

/// Adaptive-Simpson quadrature of `f` over [a, b].
fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    simpson(&f, a, b, fa, fm, fb, tol, 40)
}

/// ln ∫_{x_min}^∞ (x+x₀)^{−γ} e^{−x/κ} dx via shifted quadrature.
fn ln_norm_truncated(gamma: f64, kappa: f64, x0: f64, x_min: f64) -> f64 {
    let c = x_min + x0;
    // scale out the integrand's value at t=0 to keep the quadrature O(1)
    let scale = c.powf(-gamma);
    let g = |t: f64| ((t + c) / c).powf(-gamma) * (-t / kappa).exp();
    let upper = 80.0 * kappa;
    let integral = integrate(g, 0.0, upper, 1e-10);
    scale.ln() + integral.max(1e-300).ln() - x_min / kappa
}

/// Maximum-likelihood truncated power-law fit.
///
/// Jump/gyration: nested search — Δr₀ over a fixed grid, then coordinate
/// descent on (γ, ln κ) with golden-section line searches; the normalization
/// comes from adaptive quadrature. Waiting times are slot-resolution
/// discrete, so the pure power law is fitted with a ±0.25 h continuity
/// correction on a bounded support.
pub fn fit_truncated_power_law(samples: &[f64], form: FitForm) -> Result<PowerLawFit> {
    let xs: Vec<f64> = samples.iter().copied().filter(|&v| v > 0.0 && v.is_finite()).collect();
    if xs.len() < 100 {
        return Err(Error::data(format!("power-law fit needs ≥100 positive samples, got {}", xs.len())));
    }
    let n = xs.len() as f64;

    if form == FitForm::Waiting {
        // slot-resolution values: bin each at its centre with half-width 0.25 h
        // and maximize the discrete likelihood over the covered support. The
        // lower bound is the smallest observed value itself, not half a slot
        // below it: stays are left-censored at one slot, and pretending the
        // support reaches below the shortest observable stay starves the
        // boundary bin and drags the exponent down.
        let mut counts: BTreeMap<i64, f64> = BTreeMap::new();
        for &v in &xs {
            *counts.entry((v * 2.0).round() as i64).or_insert(0.0) += 1.0;
        }
        if counts.len() < 2 {
            return Err(Error::data("waiting fit needs ≥2 distinct durations"));
        }
        let lo = *counts.keys().next().unwrap() as f64 / 2.0;
        let hi = *counts.keys().next_back().unwrap() as f64 / 2.0 + 0.25;
        let anti = |t: f64, eps: f64| -> f64 {
            if (eps - 1.0).abs() < 1e-9 {
                t.ln()
            } else {
                t.powf(1.0 - eps) / (1.0 - eps)
            }
        };
        let neg_ll = |eps: f64| -> f64 {
            let z = anti(hi, eps) - anti(lo, eps);
            let mut ll = -n * z.ln();
            for (&k, &c) in &counts {
                let v = k as f64 / 2.0;
                let (a, b) = ((v - 0.25).max(lo), (v + 0.25).min(hi));
                ll += c * (anti(b, eps) - anti(a, eps)).max(1e-300).ln();
            }
            -ll
        };
        let eps = golden_min(0.05, 8.0, neg_ll);
        return Ok(PowerLawFit { gamma: eps, kappa: f64::INFINITY, x0: 0.0, log_likelihood: -neg_ll(eps) });
    }

    let x_min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = xs.iter().sum::<f64>() / n;
    let s_x: f64 = xs.iter().sum();
    let mut best: Option<PowerLawFit> = None;

    let (lk_lo, lk_hi) = ((0.01 * mean).ln(), (1e4 * mean).ln());
    for &x0 in &[0.0, 0.5, 1.0, 2.0, 5.0] {
        let s_ln: f64 = xs.iter().map(|&v| (v + x0).ln()).sum();
        let neg_ll = |gamma: f64, ln_kappa: f64| -> f64 {
            let kappa = ln_kappa.exp();
            n * ln_norm_truncated(gamma, kappa, x0, x_min) + gamma * s_ln + s_x / kappa
        };
        // profile likelihood over γ (κ optimized out) avoids the slow
        // coordinate-descent zigzag along the correlated (γ, κ) ridge
        let profile = |gamma: f64| -> (f64, f64) {
            let lk = golden_min(lk_lo, lk_hi, |lk| neg_ll(gamma, lk));
            (neg_ll(gamma, lk), lk)
        };
        let grid: Vec<f64> = (0..14).map(|i| -0.5 + 6.5 * i as f64 / 13.0).collect();
        let coarse: Vec<f64> = grid.iter().map(|&g| profile(g).0).collect();
        let k_best = coarse
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, _)| k)
            .expect("grid is non-empty");
        let g_lo = grid[k_best.saturating_sub(1)];
        let g_hi = grid[(k_best + 1).min(grid.len() - 1)];
        let gamma = golden_min(g_lo, g_hi, |g| profile(g).0);
        let (nll, ln_kappa) = profile(gamma);
        let ll = -nll;
        if best.as_ref().is_none_or(|b| ll > b.log_likelihood) {
            best = Some(PowerLawFit { gamma, kappa: ln_kappa.exp(), x0, log_likelihood: ll });
        }
    }
    Ok(best.expect("x0 grid is non-empty"))
}

// ---------------------------------------------------------------------------
// Zipf visitation

/// Mean visit frequency of each user's k-th favourite location.
///
/// A "visit" is a stay (maximal run); counts pool a user's days. Rank k
/// averages over the users that have at least k distinct locations.
pub fn visit_rank_frequencies(trajectories: &[Trajectory]) -> Vec<f64> {
    let mut per_user: BTreeMap<&str, BTreeMap<u32, f64>> = BTreeMap::new();
    for t in trajectories {
        let Some(dense) = dense_day(t) else { continue };
        let counts = per_user.entry(user_key(&t.user_id)).or_default();
        for (loc, _) in runs(&dense) {
            *counts.entry(loc).or_insert(0.0) += 1.0;
        }
    }
    let mut sums: Vec<(f64, f64)> = Vec::new(); // (sum of f_k, user count)
    for counts in per_user.values() {
        let total: f64 = counts.values().sum();
        let mut f: Vec<f64> = counts.values().map(|&c| c / total).collect();
        f.sort_by(|a, b| b.total_cmp(a));
        for (k, &fk) in f.iter().enumerate() {
            if k >= sums.len() {
                sums.push((0.0, 0.0));
            }
            sums[k].0 += fk;
            sums[k].1 += 1.0;
        }
    }
    sums.iter().map(|&(s, c)| s / c).collect()
}

/// Least-squares Zipf exponent: −slope of log f_k vs log k, ranks 1..min(20,K).
pub fn fit_zipf_exponent(frequencies: &[f64]) -> Result<f64> {
    let pts: Vec<(f64, f64)> = frequencies
        .iter()
        .take(20)
        .enumerate()
        .filter(|(_, &f)| f > 0.0)
        .map(|(k, &f)| (((k + 1) as f64).ln(), f.ln()))
        .collect();
    if pts.len() < 5 {
        return Err(Error::data(format!("zipf fit needs ≥5 ranks, got {}", pts.len())));
    }
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |(x, y), p| (x + p.0, y + p.1));
    let (mx, my) = (mx / n, my / n);
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (x, y) in &pts {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    Ok(-sxy / sxx)
}

// ---------------------------------------------------------------------------
// Motifs

/// Canonical directed graph of one user-day's distinct stops; days with more
/// than 6 distinct locations pool into `Other`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MotifKey {
    Graph { n: u8, bits: u64 },
    Other,
}

impl MotifKey {
    /// Stable text form for reports: `n<k>:<hex bits>` or `other`.
    pub fn label(&self) -> String {
        match self {
            MotifKey::Graph { n, bits } => format!("n{n}:{bits:x}"),
            MotifKey::Other => "other".into(),
        }
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..n).collect();
    fn heap(k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(cur.clone());
            return;
        }
        for i in 0..k {
            heap(k - 1, cur, out);
            if k % 2 == 0 {
                cur.swap(i, k - 1);
            } else {
                cur.swap(0, k - 1);
            }
        }
    }
    heap(n, &mut cur, &mut out);
    out
}

fn canonical_motif(stays: &[u32]) -> MotifKey {
    let mut ids: Vec<u32> = Vec::new();
    let mut seq: Vec<usize> = Vec::with_capacity(stays.len());
    for &loc in stays {
        let id = match ids.iter().position(|&l| l == loc) {
            Some(p) => p,
            None => {
                ids.push(loc);
                ids.len() - 1
            }
        };
        seq.push(id);
    }
    let n = ids.len();
    if n > 6 {
        return MotifKey::Other;
    }
    let mut adj = [[false; 6]; 6];
    for w in seq.windows(2) {
        if w[0] != w[1] {
            adj[w[0]][w[1]] = true;
        }
    }
    let mut best = u64::MAX;
    for p in permutations(n) {
        let mut bits = 0u64;
        for (i, row) in adj.iter().enumerate().take(n) {
            for (j, &edge) in row.iter().enumerate().take(n) {
                if edge {
                    bits |= 1u64 << (p[i] * n + p[j]);
                }
            }
        }
        best = best.min(bits);
    }
    MotifKey::Graph { n: n as u8, bits: best }
}

/// Distribution over canonical daily motifs; probabilities sum to 1.
pub fn motif_distribution(trajectories: &[Trajectory]) -> BTreeMap<MotifKey, f64> {
    let mut counts: BTreeMap<MotifKey, f64> = BTreeMap::new();
    let mut total = 0.0;
    for t in trajectories {
        let Some(dense) = dense_day(t) else { continue };
        let stays: Vec<u32> = runs(&dense).iter().map(|r| r.0).collect();
        *counts.entry(canonical_motif(&stays)).or_insert(0.0) += 1.0;
        total += 1.0;
    }
    if total > 0.0 {
        counts.values_mut().for_each(|c| *c /= total);
    }
    counts
}

/// JSD between two motif distributions over their union support.
pub fn motif_jsd(a: &BTreeMap<MotifKey, f64>, b: &BTreeMap<MotifKey, f64>) -> Result<f64> {
    let keys: Vec<&MotifKey> = a.keys().chain(b.keys()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let va: Vec<f64> = keys.iter().map(|k| a.get(k).copied().unwrap_or(0.0)).collect();
    let vb: Vec<f64> = keys.iter().map(|k| b.get(k).copied().unwrap_or(0.0)).collect();
    jsd(&va, &vb)
}

// ---------------------------------------------------------------------------
// Report assembly

pub const JSD_BINS: usize = 32;

/// One Table-3-style column: a KS statistic and a JSD over shared bins.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricColumn {
    pub ks: f64,
    pub jsd: f64,
}

/// An exponent fitted on the real corpus and on the generated one.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ExponentPair {
    pub real: f64,
    pub synthetic: f64,
}

/// Full fidelity report for one real-vs-generated comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub radius: MetricColumn,
    pub distance: MetricColumn,
    pub duration: MetricColumn,
    pub daily_loc: MetricColumn,
    pub cpc: f64,
    pub rmse: f64,
    pub motif_jsd: f64,
    /// Waiting-time exponent ε, when both corpora have ≥100 stays.
    pub waiting_exponent: Option<ExponentPair>,
    /// Zipf visitation exponent ζ, when both corpora have ≥5 ranks.
    pub zipf_exponent: Option<ExponentPair>,
    /// Jump-length power-law exponent γ₁, when fits are possible.
    pub jump_exponent: Option<ExponentPair>,
}

/// Histograms behind each JSD column, for external plotting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistogramDetail {
    pub metric: String,
    pub real: Vec<f64>,
    pub synthetic: Vec<f64>,
}

/// Report plus the data needed to re-plot it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportDetail {
    pub report: MetricsReport,
    pub histograms: Vec<HistogramDetail>,
    pub motifs: Vec<(String, f64, f64)>,
}

fn column(real: &[f64], synth: &[f64], integer_bins: bool) -> Result<MetricColumn> {
    let ks = ks_statistic(real, synth)?;
    let (h1, h2) = if integer_bins {
        shared_integer_histograms(real, synth)
    } else {
        shared_log_histograms(real, synth, JSD_BINS)
    };
    Ok(MetricColumn { ks, jsd: jsd(&h1, &h2)? })
}

/// Compare a generated corpus against a reference corpus on one grid.
pub fn build_report(
    grid: &CityGrid,
    real: &[Trajectory],
    synthetic: &[Trajectory],
    od_real: &ODMatrix,
    od_synthetic: &ODMatrix,
) -> Result<ReportDetail> {
    if real.is_empty() || synthetic.is_empty() {
        return Err(Error::data("build_report needs two non-empty corpora"));
    }
    let sr = trajectory_statistics(real, grid);
    let sg = trajectory_statistics(synthetic, grid);

    let radius = column(&sr.gyration_radii, &sg.gyration_radii, false)?;
    let distance = column(&sr.daily_distances, &sg.daily_distances, false)?;
    let duration = column(&sr.waiting_times, &sg.waiting_times, false)?;
    let daily_loc = column(&sr.daily_locations, &sg.daily_locations, true)?;

    let mr = motif_distribution(real);
    let mg = motif_distribution(synthetic);

    let pair = |a: Result<f64>, b: Result<f64>| match (a, b) {
        (Ok(real), Ok(synthetic)) => Some(ExponentPair { real, synthetic }),
        _ => None,
    };
    let waiting_exponent = pair(
        fit_truncated_power_law(&sr.waiting_times, FitForm::Waiting).map(|f| f.gamma),
        fit_truncated_power_law(&sg.waiting_times, FitForm::Waiting).map(|f| f.gamma),
    );
    let jump_exponent = pair(
        fit_truncated_power_law(&sr.jump_lengths, FitForm::Jump).map(|f| f.gamma),
        fit_truncated_power_law(&sg.jump_lengths, FitForm::Jump).map(|f| f.gamma),
    );
    let zipf_exponent = pair(
        fit_zipf_exponent(&visit_rank_frequencies(real)),
        fit_zipf_exponent(&visit_rank_frequencies(synthetic)),
    );

    let report = MetricsReport {
        radius,
        distance,
        duration,
        daily_loc,
        cpc: cpc(od_real, od_synthetic)?,
        rmse: flow_rmse(od_real, od_synthetic)?,
        motif_jsd: motif_jsd(&mr, &mg)?,
        waiting_exponent,
        zipf_exponent,
        jump_exponent,
    };

    let mut histograms = Vec::new();
    for (name, a, b, int_bins) in [
        ("radius", &sr.gyration_radii, &sg.gyration_radii, false),
        ("distance", &sr.daily_distances, &sg.daily_distances, false),
        ("duration", &sr.waiting_times, &sg.waiting_times, false),
        ("daily_loc", &sr.daily_locations, &sg.daily_locations, true),
    ] {
        let (h1, h2) = if int_bins {
            shared_integer_histograms(a, b)
        } else {
            shared_log_histograms(a, b, JSD_BINS)
        };
        histograms.push(HistogramDetail { metric: name.into(), real: h1, synthetic: h2 });
    }
    let keys: std::collections::BTreeSet<MotifKey> = mr.keys().chain(mg.keys()).copied().collect();
    let motifs = keys
        .into_iter()
        .map(|k| (k.label(), mr.get(&k).copied().unwrap_or(0.0), mg.get(&k).copied().unwrap_or(0.0)))
        .collect();

    Ok(ReportDetail { report, histograms, motifs })
}

/// Write the Table-3-style CSV: `stat,radius,distance,duration,daily_loc,cpc,rmse`.
pub fn write_report_csv(path: &Path, r: &MetricsReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(e.to_string()))?;
    w.write_record(["stat", "radius", "distance", "duration", "daily_loc", "cpc", "rmse"])
        .map_err(|e| Error::data(e.to_string()))?;
    let row = |stat: &str, vals: [f64; 4]| {
        let mut rec = vec![stat.to_string()];
        rec.extend(vals.iter().map(|v| format!("{v:.6}")));
        rec.extend(["".into(), "".into()]);
        rec
    };
    w.write_record(row("ks", [r.radius.ks, r.distance.ks, r.duration.ks, r.daily_loc.ks]))
        .map_err(|e| Error::data(e.to_string()))?;
    w.write_record(row("jsd", [r.radius.jsd, r.distance.jsd, r.duration.jsd, r.daily_loc.jsd]))
        .map_err(|e| Error::data(e.to_string()))?;
    w.write_record(["flow", "", "", "", "", &format!("{:.6}", r.cpc), &format!("{:.6}", r.rmse)])
        .map_err(|e| Error::data(e.to_string()))?;
    w.flush().map_err(|e| Error::data(e.to_string()))?;
    Ok(())
}

/// Write the detail JSON next to the CSV.
pub fn write_report_detail(path: &Path, detail: &ReportDetail) -> Result<()> {
    let text = serde_json::to_string_pretty(detail).map_err(|e| Error::data(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::data(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{build_grid, load_boundary};
    use crate::rng::{stream, Domain};
    use rand::Rng;

    fn square_grid() -> CityGrid {
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
        build_grid(&load_boundary(geojson).unwrap(), 1000.0).unwrap()
    }

    fn traj(id: &str, tokens: &[(u8, u32)], day: u8) -> Trajectory {
        Trajectory { user_id: id.into(), tokens: tokens.to_vec(), day_of_week: day }
    }

    #[test]
    fn stationary_user_statistics() {
        let grid = square_grid();
        let s = trajectory_statistics(&[traj("u1", &[(0, 3)], 0)], &grid);
        assert_eq!(s.gyration_radii, vec![0.0]);
        assert_eq!(s.daily_locations, vec![1.0]);
        assert_eq!(s.daily_distances, vec![0.0]);
        assert_eq!(s.waiting_times, vec![24.0]);
        assert!(s.jump_lengths.is_empty());
    }

    #[test]
    fn half_day_split_gyration_is_half_the_separation() {
        let grid = square_grid();
        // adjacent same-row cells: projected centres exactly 1 km apart
        let (a, b) = (0u32, 1u32);
        assert!((grid.distance_km(a, b) - 1.0).abs() < 1e-12);
        let s = trajectory_statistics(&[traj("u1", &[(0, a), (24, b)], 0)], &grid);
        assert!((s.gyration_radii[0] - 0.5).abs() < 1e-12);
        assert_eq!(s.waiting_times, vec![12.0, 12.0]);
        assert_eq!(s.jump_lengths.len(), 1);
        let expect = haversine_km(grid.locations[a as usize].center, grid.locations[b as usize].center);
        assert_eq!(s.jump_lengths[0], expect);
        assert!((expect - 1.0).abs() < 5e-3);
    }

    #[test]
    fn aba_day_sums_distance_and_counts_two_locations() {
        let grid = square_grid();
        let (a, b) = (0u32, 2u32); // two columns apart: 2 km
        let s = trajectory_statistics(&[traj("u1", &[(0, a), (16, b), (32, a)], 0)], &grid);
        let hop = haversine_km(grid.locations[a as usize].center, grid.locations[b as usize].center);
        assert!((s.daily_distances[0] - 2.0 * hop).abs() < 1e-12);
        assert!((s.daily_distances[0] - 4.0).abs() < 0.02);
        assert_eq!(s.daily_locations, vec![2.0]);
        assert_eq!(s.waiting_times, vec![8.0, 8.0, 8.0]);
    }

    #[test]
    fn multi_day_users_pool_into_one_gyration_radius() {
        let grid = square_grid();
        let ts = [traj("u1_d0", &[(0, 0)], 0), traj("u1_d1", &[(0, 1)], 1), traj("u2_d0", &[(0, 5)], 0)];
        let s = trajectory_statistics(&ts, &grid);
        assert_eq!(s.gyration_radii.len(), 2);
        // u1 splits days between two cells 1 km apart → r_g = 0.5
        assert!(s.gyration_radii.iter().any(|&r| (r - 0.5).abs() < 1e-12));
        assert!(s.gyration_radii.contains(&0.0));
    }

    #[test]
    fn statistics_ignore_trajectory_order() {
        let grid = square_grid();
        let ts: Vec<Trajectory> = (0..6)
            .map(|i| traj(&format!("u{i}"), &[(0, i), (20, (i + 7) % 36), (40, i)], 0))
            .collect();
        let mut rev = ts.clone();
        rev.reverse();
        let a = trajectory_statistics(&ts, &grid);
        let b = trajectory_statistics(&rev, &grid);
        assert_eq!(a.jump_lengths, b.jump_lengths);
        assert_eq!(a.gyration_radii, b.gyration_radii);
        assert_eq!(a.waiting_times, b.waiting_times);
        assert_eq!(a.daily_distances, b.daily_distances);
        assert_eq!(a.daily_locations, b.daily_locations);
    }

    #[test]
    fn jsd_examples_and_symmetry() {
        let u = [0.25, 0.25, 0.25, 0.25];
        assert_eq!(jsd(&u, &u).unwrap(), 0.0);
        assert!((jsd(&[0.5, 0.5, 0.0, 0.0], &[0.0, 0.0, 0.5, 0.5]).unwrap() - 1.0).abs() < 1e-12);
        let d = jsd(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!((d - 0.3113).abs() < 1e-4, "jsd {d}");
        assert_eq!(jsd(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), jsd(&[1.0, 0.0], &[0.5, 0.5]).unwrap());
        assert!(jsd(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn ks_examples_and_monotone_invariance() {
        assert_eq!(ks_statistic(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(ks_statistic(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]).unwrap(), 1.0);
        assert!((ks_statistic(&[1.0, 2.0, 3.0, 4.0], &[3.0, 4.0, 5.0, 6.0]).unwrap() - 0.5).abs() < 1e-12);
        let a = [0.3, 1.2, 2.5, 4.0, 0.9];
        let b = [0.5, 1.6, 2.2, 3.0];
        let t = |v: f64| (v * 2.0 + 1.0).exp();
        let ta: Vec<f64> = a.iter().map(|&v| t(v)).collect();
        let tb: Vec<f64> = b.iter().map(|&v| t(v)).collect();
        assert!((ks_statistic(&a, &b).unwrap() - ks_statistic(&ta, &tb).unwrap()).abs() < 1e-12);
        assert!(ks_statistic(&[], &[1.0]).is_err());
    }

    #[test]
    fn cpc_examples() {
        let mut obs = ODMatrix::zeros(3);
        obs.add(0, 1, 4.0);
        assert_eq!(cpc(&obs, &obs).unwrap(), 1.0);
        let mut gen = ODMatrix::zeros(3);
        gen.add(0, 1, 2.0);
        gen.add(0, 2, 2.0);
        assert!((cpc(&obs, &gen).unwrap() - 0.5).abs() < 1e-12);
        let mut disjoint = ODMatrix::zeros(3);
        disjoint.add(2, 0, 4.0);
        assert_eq!(cpc(&obs, &disjoint).unwrap(), 0.0);
        assert_eq!(cpc(&ODMatrix::zeros(2), &ODMatrix::zeros(2)).unwrap(), 1.0);
        // scale invariance
        let mut obs2 = obs.clone();
        let mut gen2 = gen.clone();
        obs2.flows.iter_mut().for_each(|f| *f *= 7.0);
        gen2.flows.iter_mut().for_each(|f| *f *= 7.0);
        assert!((cpc(&obs, &gen).unwrap() - cpc(&obs2, &gen2).unwrap()).abs() < 1e-12);
        assert!(cpc(&obs, &ODMatrix::zeros(4)).is_err());
    }

    #[test]
    fn rmse_examples() {
        let mut obs = ODMatrix::zeros(2);
        obs.add(0, 1, 3.0);
        assert_eq!(flow_rmse(&obs, &obs).unwrap(), 0.0);
        let mut c = ODMatrix::zeros(2);
        c.flows.iter_mut().for_each(|f| *f = 2.5);
        assert!((flow_rmse(&ODMatrix::zeros(2), &c).unwrap() - 2.5).abs() < 1e-12);
        let mut obs_s = obs.clone();
        obs_s.flows.iter_mut().for_each(|f| *f *= 3.0);
        assert!((flow_rmse(&obs_s, &ODMatrix::zeros(2)).unwrap() - 3.0 * flow_rmse(&obs, &ODMatrix::zeros(2)).unwrap()).abs() < 1e-12);
    }

    fn draw_truncated(n: usize, gamma: f64, kappa: f64, x_min: f64, seed: u64) -> Vec<f64> {
        // propose from the pure power law by inverse CDF, accept with e^{-x/κ}
        let mut rng = stream(seed, Domain::PowerLawDraw, 50);
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let u: f64 = rng.random_range(0.0..1.0);
            let x = x_min * (1.0 - u).powf(-1.0 / (gamma - 1.0));
            let a: f64 = rng.random_range(0.0..1.0);
            if a < (-x / kappa).exp() {
                out.push(x);
            }
        }
        out
    }

    #[test]
    fn planted_truncated_power_law_recovers_gamma() {
        let xs = draw_truncated(100_000, 1.2, 100.0, 1.0, 1);
        let fit = fit_truncated_power_law(&xs, FitForm::Jump).unwrap();
        assert!((fit.gamma - 1.2).abs() < 0.1, "gamma {} kappa {} x0 {}", fit.gamma, fit.kappa, fit.x0);
    }

    #[test]
    fn planted_exponential_recovers_gamma_zero() {
        let mut rng = stream(2, Domain::PowerLawDraw, 51);
        let xs: Vec<f64> = (0..100_000)
            .map(|_| {
                let u: f64 = rng.random_range(0.0..1.0);
                1.0 - 5.0 * (1.0 - u).ln()
            })
            .collect();
        let fit = fit_truncated_power_law(&xs, FitForm::Jump).unwrap();
        assert!(fit.gamma.abs() < 0.1, "gamma {} kappa {} x0 {}", fit.gamma, fit.kappa, fit.x0);
    }

    #[test]
    fn planted_waiting_power_law_recovers_epsilon() {
        // continuous draw over the fitter's support model (left-censored at
        // the smallest slot value, half-bin extension on the right), then
        // slotize, so the discretization matches the bin model exactly
        let (eps, a, b) = (2.1f64, 0.5f64, 17.25f64);
        let mut rng = stream(3, Domain::PowerLawDraw, 52);
        let xs: Vec<f64> = (0..100_000)
            .map(|_| {
                let u: f64 = rng.random_range(0.0..1.0);
                let t = (a.powf(1.0 - eps) + u * (b.powf(1.0 - eps) - a.powf(1.0 - eps))).powf(1.0 / (1.0 - eps));
                ((t * 2.0).round() / 2.0).clamp(0.5, 17.0)
            })
            .collect();
        let fit = fit_truncated_power_law(&xs, FitForm::Waiting).unwrap();
        assert!(fit.kappa.is_infinite());
        assert!((fit.gamma - 2.1).abs() < 0.1, "epsilon {}", fit.gamma);
    }

    #[test]
    fn power_law_fit_rejects_small_samples() {
        assert!(fit_truncated_power_law(&[1.0; 50], FitForm::Jump).is_err());
    }

    #[test]
    fn zipf_examples() {
        let exact: Vec<f64> = (1..=10).map(|k| (k as f64).powf(-0.5)).collect();
        assert!((fit_zipf_exponent(&exact).unwrap() - 0.5).abs() < 1e-6);
        let uniform = vec![0.1; 10];
        assert!(fit_zipf_exponent(&uniform).unwrap().abs() < 1e-12);
        assert!(fit_zipf_exponent(&[1.0, 0.5, 0.3]).is_err());
    }

    #[test]
    fn visit_rank_frequencies_average_over_users() {
        let ts = [
            traj("u1", &[(0, 0), (16, 1), (32, 0)], 0), // counts A:2 B:1
            traj("u2", &[(0, 7)], 0),                   // single location
        ];
        let f = visit_rank_frequencies(&ts);
        assert!((f[0] - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-12);
        assert!((f[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn motif_examples() {
        let stationary = [traj("u1", &[(0, 4)], 0), traj("u2", &[(0, 9)], 0)];
        let m = motif_distribution(&stationary);
        assert_eq!(m.len(), 1);
        assert_eq!(m[&MotifKey::Graph { n: 1, bits: 0 }], 1.0);

        let aba = [traj("u1", &[(0, 2), (16, 5), (32, 2)], 0)];
        let m2 = motif_distribution(&aba);
        let key = *m2.keys().next().unwrap();
        match key {
            MotifKey::Graph { n, bits } => {
                assert_eq!(n, 2);
                assert_eq!(bits.count_ones(), 2); // A→B and B→A
            }
            MotifKey::Other => panic!("not other"),
        }
        // relabeled isomorphic days collide
        let relabeled = [traj("u1", &[(0, 30), (16, 11), (32, 30)], 0)];
        assert_eq!(motif_distribution(&relabeled).keys().next().unwrap(), &key);

        // chains in either direction are isomorphic
        let chain = [traj("u1", &[(0, 0), (10, 1), (20, 2)], 0)];
        let chain_rev = [traj("u1", &[(0, 2), (10, 1), (20, 0)], 0)];
        assert_eq!(
            motif_distribution(&chain).keys().next().unwrap(),
            motif_distribution(&chain_rev).keys().next().unwrap()
        );
    }

    #[test]
    fn motif_probabilities_sum_to_one_and_overflow_pools() {
        let mut tokens: Vec<(u8, u32)> = (0..8).map(|k| (k * 5, k as u32)).collect();
        tokens.push((41, 0));
        let ts = [traj("u1", &tokens, 0), traj("u2", &[(0, 1)], 0), traj("u3", &[(0, 2), (24, 3)], 0)];
        let m = motif_distribution(&ts);
        let total: f64 = m.values().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(m.contains_key(&MotifKey::Other));
    }

    #[test]
    fn report_self_comparison_is_all_zero() {
        let grid = square_grid();
        let mut rng = stream(9, Domain::PowerLawDraw, 53);
        let corpus: Vec<Trajectory> = (0..8)
            .map(|i| {
                let a = rng.random_range(0..36u32);
                let b = rng.random_range(0..36u32);
                traj(&format!("u{i}"), &[(0, a), (20, b), (40, a)], (i % 7) as u8)
            })
            .collect();
        let mut od = ODMatrix::zeros(36);
        for t in &corpus {
            od.add(t.tokens[0].1 as usize, t.tokens[1].1 as usize, 1.0);
        }
        let detail = build_report(&grid, &corpus, &corpus, &od, &od).unwrap();
        let r = &detail.report;
        for c in [r.radius, r.distance, r.duration, r.daily_loc] {
            assert_eq!(c.ks, 0.0);
            assert_eq!(c.jsd, 0.0);
        }
        assert_eq!(r.cpc, 1.0);
        assert_eq!(r.rmse, 0.0);
        assert_eq!(r.motif_jsd, 0.0);
        assert_eq!(detail.histograms.len(), 4);
    }

    #[test]
    fn report_csv_has_table_layout() {
        let grid = square_grid();
        let corpus = vec![traj("u1", &[(0, 0), (24, 3)], 0), traj("u2", &[(0, 5)], 1)];
        let od = ODMatrix::zeros(36);
        let detail = build_report(&grid, &corpus, &corpus, &od, &od).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        write_report_csv(&path, &detail.report).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "stat,radius,distance,duration,daily_loc,cpc,rmse");
        assert!(lines.next().unwrap().starts_with("ks,"));
        assert!(lines.next().unwrap().starts_with("jsd,"));
        assert!(lines.next().unwrap().starts_with("flow,"));
    }
}
