//! Conversions between stamped visits, 48-slot days, and embedding sequences.
//!
//! Slot semantics: the day is divided into 48 half-hour slots; slot 0 covers
//! 00:00–00:30, slot 27 covers 13:30–14:00, slot 47 covers 23:30–24:00.
//! `day_of_week` is 0 = Monday … 6 = Sunday.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autoencoder::AutoencoderParams;
use crate::error::{Error, Result};
use crate::features::FeatureTable;
use crate::{EMBED_DIM, SLOT_COUNT};

const SLOT_SECS: u32 = 1800;

/// One user-day of visited locations as (slot, location) tokens.
///
/// `user_id` must be unique per released file; multi-day users get one
/// trajectory per day with a day-suffixed id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub user_id: String,
    /// Strictly increasing slots in [0, 48).
    pub tokens: Vec<(u8, u32)>,
    pub day_of_week: u8,
}

/// A fully filled day: one location per half-hour slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DaySequence {
    /// Exactly 48 location indices.
    pub locations: Vec<u32>,
    pub day_of_week: u8,
}

/// A day in embedding space: 48×8 matrix plus its day-of-week label.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub x: Array2<f64>,
    pub day_of_week: u8,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StampedVisit {
    pub t: NaiveDateTime,
    pub location: u32,
}

/// Start of a slot as `HH:MM` (slot 27 → "13:30").
pub fn slot_start_hhmm(slot: u8) -> String {
    let m = slot as u32 * 30;
    format!("{:02}:{:02}", m / 60, m % 60)
}

/// Convert a stamped visit stream (one user) into filled 48-slot days.
///
/// Within a day, a visit holds its location until the next visit (the last one
/// holds to midnight). Each slot takes the location with the longest dwell in
/// its window; ties go to the earlier-entered, then smaller-indexed location.
/// Slots before the day's first visit are back-filled from it, but count as
/// raw-missing: a day with more than 50% raw-missing slots is dropped.
pub fn slotize(visits: &[StampedVisit]) -> Vec<DaySequence> {
    let mut by_day: BTreeMap<NaiveDate, Vec<(u32, u32)>> = BTreeMap::new();
    for v in visits {
        by_day
            .entry(v.t.date())
            .or_default()
            .push((v.t.time().num_seconds_from_midnight(), v.location));
    }

    let mut out = Vec::new();
    for (date, mut events) in by_day {
        events.sort_by_key(|&(t, _)| t);
        let first_t = events[0].0;

        let raw_missing = (0..SLOT_COUNT as u32).filter(|s| (s + 1) * SLOT_SECS <= first_t).count();
        if raw_missing * 2 > SLOT_COUNT {
            continue;
        }

        let mut locations = Vec::with_capacity(SLOT_COUNT);
        for s in 0..SLOT_COUNT as u32 {
            let (w0, w1) = (s * SLOT_SECS, (s + 1) * SLOT_SECS);
            // Dwell per location inside [w0, w1), walking the step function.
            let mut dwell: Vec<(u32, u32, u32)> = Vec::new(); // (loc, secs, entered)
            for (k, &(t0, loc)) in events.iter().enumerate() {
                let t1 = events.get(k + 1).map_or(86_400, |e| e.0);
                let (a, b) = (t0.max(w0), t1.min(w1));
                if a >= b {
                    continue;
                }
                match dwell.iter_mut().find(|d| d.0 == loc) {
                    Some(d) => d.1 += b - a,
                    None => dwell.push((loc, b - a, a)),
                }
            }
            let slot_loc = dwell
                .iter()
                .max_by(|x, y| {
                    x.1.cmp(&y.1)
                        .then(y.2.cmp(&x.2)) // earlier entry wins
                        .then(y.0.cmp(&x.0)) // smaller index wins
                })
                .map(|d| d.0)
                .unwrap_or(events[0].1); // before first visit: back-fill
            locations.push(slot_loc);
        }

        out.push(DaySequence {
            locations,
            day_of_week: date.weekday().num_days_from_monday() as u8,
        });
    }
    out
}

/// Raw (unstandardized) embedding of every location, one row per index.
pub fn location_embeddings(ae: &AutoencoderParams, table: &FeatureTable) -> Array2<f64> {
    let m = table.len();
    let mut x = Array2::zeros((m, crate::FEATURE_DIM));
    for i in 0..m {
        x.row_mut(i).assign(&ndarray::ArrayView1::from(table.row(i)));
    }
    ae.encode_batch(&x.view())
}

/// Look up each slot's location embedding; `loc_emb` rows are per-location
/// embeddings (standardized or not — the caller decides which space).
pub fn embed_day(day: &DaySequence, loc_emb: &ArrayView2<f64>) -> Result<EmbeddingSequence> {
    if day.locations.len() != SLOT_COUNT {
        return Err(Error::data(format!("day has {} slots, want {SLOT_COUNT}", day.locations.len())));
    }
    let m = loc_emb.dim().0;
    let mut x = Array2::zeros((SLOT_COUNT, EMBED_DIM));
    for (k, &loc) in day.locations.iter().enumerate() {
        if loc as usize >= m {
            return Err(Error::data(format!("location index {loc} outside table of {m}")));
        }
        x.row_mut(k).assign(&loc_emb.row(loc as usize));
    }
    Ok(EmbeddingSequence { x, day_of_week: day.day_of_week })
}

// ---------------------------------------------------------------------------
// Released trajectory format

/// Serialize to the released JSON shape: `{"user": [[slot, loc], ...], ...}`
/// with sorted keys. Duplicate user ids are an error.
pub fn to_released_format(trajectories: &[Trajectory]) -> Result<String> {
    let mut map: BTreeMap<&str, &Vec<(u8, u32)>> = BTreeMap::new();
    for t in trajectories {
        if map.insert(t.user_id.as_str(), &t.tokens).is_some() {
            return Err(Error::data(format!("duplicate user_id {:?}", t.user_id)));
        }
    }
    Ok(serde_json::to_string(&map)?)
}

/// Parse the released format. The format carries no day-of-week, so parsed
/// trajectories get `day_of_week = 0`.
pub fn parse_released_format(text: &str) -> Result<Vec<Trajectory>> {
    let map: BTreeMap<String, Vec<(u8, u32)>> = serde_json::from_str(text)?;
    let mut out = Vec::with_capacity(map.len());
    for (user_id, tokens) in map {
        for w in tokens.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::data(format!("user {user_id}: slots not strictly increasing")));
            }
        }
        if let Some(&(s, _)) = tokens.iter().find(|&&(s, _)| s as usize >= SLOT_COUNT) {
            return Err(Error::data(format!("user {user_id}: slot {s} out of range")));
        }
        out.push(Trajectory { user_id, tokens, day_of_week: 0 });
    }
    Ok(out)
}

pub fn write_released_file(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    std::fs::write(path, to_released_format(trajectories)?)?;
    Ok(())
}

pub fn read_released_file(path: &Path) -> Result<Vec<Trajectory>> {
    parse_released_format(&std::fs::read_to_string(path)?)
}

/// Read `user_id,timestamp_iso8601,location_index` rows grouped per user,
/// each user's visits sorted by time.
pub fn read_visits_csv(path: &Path) -> Result<Vec<(String, Vec<StampedVisit>)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut by_user: BTreeMap<String, Vec<StampedVisit>> = BTreeMap::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::data(format!("visits csv: {e}")))?;
        let user = rec.get(0).unwrap_or("").trim().to_string();
        let t = rec.get(1).and_then(|s| s.trim().parse::<NaiveDateTime>().ok());
        let loc = rec.get(2).and_then(|s| s.trim().parse::<u32>().ok());
        match (t, loc) {
            (Some(t), Some(location)) => {
                by_user.entry(user).or_default().push(StampedVisit { t, location })
            }
            _ if n == 0 => continue, // header
            _ => return Err(Error::data(format!("visits csv: bad row {}", n + 1))),
        }
    }
    let mut out: Vec<(String, Vec<StampedVisit>)> = by_user.into_iter().collect();
    for (_, visits) in &mut out {
        visits.sort_by_key(|v| v.t);
    }
    Ok(out)
}

/// Expand a trajectory's tokens to a dense 48-slot location vector by holding
/// each location until the next token (and the first token's location before
/// it). Empty trajectories yield `None`.
pub fn dense_day(t: &Trajectory) -> Option<Vec<u32>> {
    if t.tokens.is_empty() {
        return None;
    }
    let mut out = vec![t.tokens[0].1; SLOT_COUNT];
    for w in 0..t.tokens.len() {
        let (s, loc) = t.tokens[w];
        let end = t.tokens.get(w + 1).map_or(SLOT_COUNT, |&(s1, _)| s1 as usize);
        for slot in s as usize..end {
            out[slot] = loc;
        }
    }
    Some(out)
}
