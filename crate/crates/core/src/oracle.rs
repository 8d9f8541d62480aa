//! Mechanistic ground-truth corpora: exploration--preferential-return (EPR)
//! walkers on a city grid. The walkers have known mobility laws (truncated
//! power-law waits, Zipf visitation), so the full pipeline can be validated
//! end to end without license-restricted trajectory data.

use chrono::{Duration, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{slotize, DaySequence, StampedVisit, Trajectory};
use crate::error::{Error, Result};
use crate::features::{FeatureTable, ODMatrix};
use crate::geo::CityGrid;
use crate::rng::{stream, Domain};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Walker parameters. Defaults land inside the empirical exponent bands the
/// pipeline is expected to reproduce.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EprConfig {
    pub n_users: usize,
    pub n_days: usize,
    /// Exploration prefactor ρ; P(explore) = ρ·S^{-γ}.
    pub rho: f64,
    /// Exploration decay γ.
    pub gamma: f64,
    /// Waiting-time power-law exponent ε.
    pub waiting_exponent: f64,
    /// Waiting-time support in hours.
    pub wait_min_h: f64,
    pub wait_max_h: f64,
    /// Gravity exponent for exploration destination choice.
    pub gravity: f64,
    pub seed: u64,
}

impl Default for EprConfig {
    fn default() -> Self {
        EprConfig {
            n_users: 2000,
            n_days: 7,
            rho: 0.6,
            gamma: 0.21,
            waiting_exponent: 2.1,
            wait_min_h: 0.5,
            wait_max_h: 17.0,
            gravity: 2.0,
            seed: 0,
        }
    }
}

impl EprConfig {
    fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_days == 0 {
            return Err(Error::config("n_users and n_days must be ≥ 1"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::config(format!("rho must be in [0, 1], got {}", self.rho)));
        }
        if self.gamma <= 0.0 || self.waiting_exponent <= 0.0 || self.gravity <= 0.0 {
            return Err(Error::config("exponents must be > 0"));
        }
        if !(self.wait_min_h > 0.0 && self.wait_min_h < self.wait_max_h) {
            return Err(Error::config("need 0 < wait_min_h < wait_max_h"));
        }
        Ok(())
    }
}

/// A generated ground-truth corpus with its all-window OD and the config that
/// produced it.
#[derive(Debug, Clone)]
pub struct OracleCorpus {
    pub trajectories: Vec<Trajectory>,
    pub od: ODMatrix,
    pub provenance: EprConfig,
}

/// OD counting window over destination arrival slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OdWindow {
    /// 07:00-09:00 (slots 14..18).
    Morning,
    /// 17:00-19:00 (slots 34..38).
    Evening,
    All,
}

impl OdWindow {
    fn contains(self, slot: u8) -> bool {
        match self {
            OdWindow::Morning => (14..18).contains(&slot),
            OdWindow::Evening => (34..38).contains(&slot),
            OdWindow::All => true,
        }
    }
}

/// Inverse-CDF draw from p(t) ∝ t^{-ε} on [a, b].
fn draw_wait(rng: &mut ChaCha8Rng, eps: f64, a: f64, b: f64) -> f64 {
    let u: f64 = rng.random_range(0.0..1.0);
    if (eps - 1.0).abs() < 1e-9 {
        return a * (b / a).powf(u);
    }
    let (pa, pb) = (a.powf(1.0 - eps), b.powf(1.0 - eps));
    (pa + u * (pb - pa)).powf(1.0 / (1.0 - eps))
}

/// Weighted index draw; uniform fallback when all weights vanish.
fn weighted_pick(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return rng.random_range(0..weights.len());
    }
    let mut u: f64 = rng.random_range(0.0..total);
    for (k, &w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return k;
        }
    }
    weights.len() - 1
}

/// One user's arrival events over the whole horizon, in continuous hours.
fn walk_user(
    rng: &mut ChaCha8Rng,
    grid: &CityGrid,
    attract: &[f64],
    cfg: &EprConfig,
) -> Vec<(f64, u32)> {
    let m = attract.len();
    let home = weighted_pick(rng, attract) as u32;
    let mut counts = vec![0.0f64; m];
    let mut last_day = vec![i64::MIN; m];
    counts[home as usize] = 1.0;
    last_day[home as usize] = 0;
    let mut n_visited = 1usize;
    let mut cur = home;
    let mut events = vec![(0.0, home)];
    let horizon = cfg.n_days as f64 * 24.0;
    let mut t = 0.0;
    let mut explore_w = vec![0.0f64; m];

    loop {
        t += draw_wait(rng, cfg.waiting_exponent, cfg.wait_min_h, cfg.wait_max_h);
        if t >= horizon {
            break;
        }
        let day = (t / 24.0) as i64;
        let p_new = cfg.rho * (n_visited as f64).powf(-cfg.gamma);
        let explore = n_visited < m && rng.random_range(0.0..1.0) < p_new;
        if explore {
            for (j, w) in explore_w.iter_mut().enumerate() {
                *w = if counts[j] > 0.0 || j == cur as usize {
                    0.0
                } else {
                    attract[j] / grid.distance_km(cur, j as u32).powf(cfg.gravity)
                };
            }
            // all-zero weights (unpopulated remainder) fall back to uniform,
            // but only over unvisited cells
            if explore_w.iter().sum::<f64>() <= 0.0 {
                for (j, w) in explore_w.iter_mut().enumerate() {
                    *w = if counts[j] > 0.0 { 0.0 } else { 1.0 };
                }
            }
            cur = weighted_pick(rng, &explore_w) as u32;
            counts[cur as usize] = 1.0;
            last_day[cur as usize] = day;
            n_visited += 1;
            events.push((t, cur));
        } else {
            // return somewhere previously visited; a "return" to the current
            // cell would silently merge two waits into one long stay and
            // flatten the waiting-time law, so the current cell is excluded
            let saved = counts[cur as usize];
            counts[cur as usize] = 0.0;
            if counts.iter().sum::<f64>() > 0.0 {
                let dest = weighted_pick(rng, &counts) as u32;
                counts[cur as usize] = saved;
                cur = dest;
                // visit counts are per day: repeat same-day arrivals do not
                // compound the preferential weight
                if last_day[cur as usize] != day {
                    counts[cur as usize] += 1.0;
                    last_day[cur as usize] = day;
                }
                events.push((t, cur));
            } else {
                counts[cur as usize] = saved; // nowhere else yet: stay put
            }
        }
    }
    events
}

/// Location occupied at hour `t` (events are sorted by time).
fn location_at(events: &[(f64, u32)], t: f64) -> u32 {
    match events.binary_search_by(|e| e.0.total_cmp(&t)) {
        Ok(k) => events[k].1,
        Err(0) => events[0].1,
        Err(k) => events[k - 1].1,
    }
}

// Weekday anchor so day 0 is a Monday (`day_of_week` 0).
const BASE_DATE: (i32, u32, u32) = (2024, 1, 1);

fn slotize_events(events: &[(f64, u32)], n_days: usize) -> Vec<DaySequence> {
    let base = NaiveDate::from_ymd_opt(BASE_DATE.0, BASE_DATE.1, BASE_DATE.2)
        .expect("valid base date")
        .and_hms_opt(0, 0, 0)
        .expect("valid base time");
    // second-rounding must never push an event past the horizon midnight,
    // which would fabricate an extra day
    let last_sec = n_days as i64 * 86_400 - 1;
    let mut visits: Vec<StampedVisit> = Vec::with_capacity(events.len() + n_days);
    for &(t, loc) in events {
        let secs = ((t * 3600.0).round() as i64).min(last_sec);
        visits.push(StampedVisit { t: base + Duration::seconds(secs), location: loc });
    }
    // carry the occupied location over each midnight so quiet days still exist
    for d in 1..n_days {
        let t = d as f64 * 24.0;
        if events.iter().all(|&(et, _)| (et - t).abs() > 1e-9) {
            visits.push(StampedVisit {
                t: base + Duration::seconds((t * 3600.0).round() as i64),
                location: location_at(events, t),
            });
        }
    }
    slotize(&visits)
}

fn tokens_from_day(day: &DaySequence) -> Vec<(u8, u32)> {
    let mut tokens: Vec<(u8, u32)> = Vec::new();
    for (s, &loc) in day.locations.iter().enumerate() {
        if tokens.last().map(|&(_, l)| l) != Some(loc) {
            tokens.push((s as u8, loc));
        }
    }
    tokens
}

/// Generate a seeded EPR corpus on `grid`, with per-location attractiveness
/// taken from the population feature of `table`.
pub fn generate_epr_corpus(grid: &CityGrid, table: &FeatureTable, cfg: &EprConfig) -> Result<OracleCorpus> {
    cfg.validate()?;
    if table.len() != grid.len() || grid.len() == 0 {
        return Err(Error::data(format!(
            "feature table covers {} locations, grid has {}",
            table.len(),
            grid.len()
        )));
    }
    let attract: Vec<f64> = (0..table.len()).map(|i| table.pop(i)).collect();

    let per_user: Vec<Vec<Trajectory>> = (0..cfg.n_users)
        .into_par_iter()
        .map(|u| {
            let mut rng = stream(cfg.seed, Domain::OracleAgent, u as u64);
            let events = walk_user(&mut rng, grid, &attract, cfg);
            slotize_events(&events, cfg.n_days)
                .iter()
                .enumerate()
                .map(|(d, day)| Trajectory {
                    user_id: format!("u{u:05}_d{d}"),
                    tokens: tokens_from_day(day),
                    day_of_week: day.day_of_week,
                })
                .collect()
        })
        .collect();

    let trajectories: Vec<Trajectory> = per_user.into_iter().flatten().collect();
    let od = derive_od(&trajectories, grid.len(), OdWindow::All)?;
    Ok(OracleCorpus { trajectories, od, provenance: cfg.clone() })
}

/// Count transitions between consecutive distinct locations whose arrival
/// slot falls in `window`.
pub fn derive_od(trajectories: &[Trajectory], n_locations: usize, window: OdWindow) -> Result<ODMatrix> {
    if trajectories.is_empty() {
        return Err(Error::data("derive_od needs a non-empty corpus"));
    }
    let mut od = ODMatrix::zeros(n_locations);
    for t in trajectories {
        for w in t.tokens.windows(2) {
            let (src, (slot, dst)) = (w[0].1, w[1]);
            if src != dst && window.contains(slot) {
                od.add(src as usize, dst as usize, 1.0);
            }
        }
    }
    Ok(od)
}
