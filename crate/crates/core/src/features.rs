//! Per-location 38-dim feature profiles.
//!
//! Layout per location: `[pop(1) | poi(34) | popularity(1) | coords(2)]`.
//! Population is min-max-normalized log1p of raster counts, the POI block is
//! an ε-smoothed category distribution, popularity is the fractional inflow
//! rank derived from the OD matrix, and coords are the grid's `local_uv`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{CityGrid, LatLon};
use crate::{FEATURE_DIM, POI_DIM, RANK_CLASSES};

/// Smoothing added to every POI bin so the KL loss stays finite.
pub const POI_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct PopSample {
    pub pos: LatLon,
    pub count: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct PoiPoint {
    pub pos: LatLon,
    pub category: u8,
}

/// Dense origin-destination flow matrix; entry (i, j) is flow from i to j.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ODMatrix {
    pub dim: usize,
    /// Row-major `dim × dim` flows.
    pub flows: Vec<f64>,
}

impl ODMatrix {
    pub fn zeros(dim: usize) -> Self {
        ODMatrix { dim, flows: vec![0.0; dim * dim] }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.flows[i * self.dim + j]
    }

    pub fn add(&mut self, i: usize, j: usize, flow: f64) {
        self.flows[i * self.dim + j] += flow;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.flows[i * self.dim..(i + 1) * self.dim]
    }

    /// Column sums: total flow into each location.
    pub fn inflows(&self) -> Vec<f64> {
        let mut inflow = vec![0.0; self.dim];
        for i in 0..self.dim {
            for (j, f) in self.row(i).iter().enumerate() {
                inflow[j] += f;
            }
        }
        inflow
    }

    pub fn total(&self) -> f64 {
        self.flows.iter().sum()
    }
}

/// Normalization constants kept with the table so encoding is reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormMeta {
    pub pop_log_min: f64,
    pub pop_log_max: f64,
    /// Inflow values at the decile boundaries, 11 points from min to max.
    pub rank_edges: Vec<f64>,
}

/// Assembled per-location profiles plus rank targets for the encoder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureTable {
    /// Row-major location-by-feature matrix; each row has 38 entries.
    pub features: Vec<Vec<f64>>,
    /// Popularity decile per location, 0 = least visited, 9 = most.
    pub rank_class: Vec<u8>,
    pub norm: NormMeta,
}

impl FeatureTable {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i]
    }

    pub fn pop(&self, i: usize) -> f64 {
        self.features[i][0]
    }

    pub fn poi(&self, i: usize) -> &[f64] {
        &self.features[i][1..1 + POI_DIM]
    }

    pub fn popularity(&self, i: usize) -> f64 {
        self.features[i][1 + POI_DIM]
    }

    pub fn coords(&self, i: usize) -> [f64; 2] {
        [self.features[i][36], self.features[i][37]]
    }
}

/// Sum raster counts into the grid cell containing each sample; samples that
/// fall in no kept cell are dropped.
pub fn aggregate_population(grid: &CityGrid, samples: &[PopSample]) -> Vec<f64> {
    let mut counts = vec![0.0; grid.len()];
    for s in samples {
        if let Some(idx) = grid.locate(s.pos) {
            counts[idx as usize] += s.count;
        }
    }
    counts
}

/// Per-cell POI category distributions with ε-smoothing; a cell without POIs
/// gets the uniform distribution.
pub fn poi_histogram(grid: &CityGrid, pois: &[PoiPoint]) -> Vec<Vec<f64>> {
    let mut counts = vec![vec![0.0f64; POI_DIM]; grid.len()];
    for p in pois {
        if let Some(idx) = grid.locate(p.pos) {
            counts[idx as usize][p.category as usize] += 1.0;
        }
    }
    for row in &mut counts {
        let total: f64 = row.iter().sum::<f64>() + POI_EPS * POI_DIM as f64;
        for v in row.iter_mut() {
            *v = (*v + POI_EPS) / total;
        }
    }
    counts
}

/// Fractional inflow rank per location.
///
/// Returns `(percentile, rank_class)`: percentile is the fractional rank of
/// inflow scaled to [0,1] (ties share their mean rank), and rank_class is the
/// decile bucket, 9 = most visited.
pub fn popularity_rank(od: &ODMatrix) -> (Vec<f64>, Vec<u8>) {
    let inflow = od.inflows();
    let m = inflow.len();
    if m == 1 {
        return (vec![0.5], vec![5]);
    }

    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| inflow[a].total_cmp(&inflow[b]).then(a.cmp(&b)));

    // Mean rank over each tied run, then scale (rank-1)/(m-1) into [0,1].
    let mut percentile = vec![0.0; m];
    let mut start = 0;
    while start < m {
        let mut end = start + 1;
        while end < m && inflow[order[end]] == inflow[order[start]] {
            end += 1;
        }
        let mean_rank = (start + end - 1) as f64 / 2.0; // zero-based
        for &loc in &order[start..end] {
            percentile[loc] = mean_rank / (m - 1) as f64;
        }
        start = end;
    }

    let rank_class = percentile
        .iter()
        .map(|&p| ((p * RANK_CLASSES as f64) as usize).min(RANK_CLASSES - 1) as u8)
        .collect();
    (percentile, rank_class)
}

/// Build the feature table from the per-block inputs.
pub fn assemble_features(
    grid: &CityGrid,
    pop_counts: &[f64],
    poi_dists: &[Vec<f64>],
    popularity: &[f64],
    rank_class: &[u8],
) -> Result<FeatureTable> {
    let m = grid.len();
    if pop_counts.len() != m || poi_dists.len() != m || popularity.len() != m || rank_class.len() != m
    {
        return Err(Error::data(format!(
            "feature inputs misaligned: grid has {m} locations, got pop={}, poi={}, popularity={}, rank={}",
            pop_counts.len(),
            poi_dists.len(),
            popularity.len(),
            rank_class.len()
        )));
    }

    let logs: Vec<f64> = pop_counts.iter().map(|&c| c.ln_1p()).collect();
    let log_min = logs.iter().cloned().fold(f64::INFINITY, f64::min);
    let log_max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = log_max - log_min;

    let mut pct_sorted = popularity.to_vec();
    pct_sorted.sort_by(f64::total_cmp);
    let rank_edges = (0..=10)
        .map(|k| {
            let pos = (k as f64 / 10.0) * (m - 1) as f64;
            pct_sorted[pos.round() as usize]
        })
        .collect();

    let mut features = Vec::with_capacity(m);
    for i in 0..m {
        let mut row = Vec::with_capacity(FEATURE_DIM);
        row.push(if span > 0.0 { (logs[i] - log_min) / span } else { 0.0 });
        row.extend_from_slice(&poi_dists[i]);
        row.push(popularity[i]);
        let uv = grid.locations[i].local_uv;
        row.push(uv[0]);
        row.push(uv[1]);
        debug_assert_eq!(row.len(), FEATURE_DIM);
        features.push(row);
    }

    Ok(FeatureTable {
        features,
        rank_class: rank_class.to_vec(),
        norm: NormMeta { pop_log_min: log_min, pop_log_max: log_max, rank_edges },
    })
}

/// Convenience: run the whole profiling pipeline.
pub fn build_feature_table(
    grid: &CityGrid,
    raster: &[PopSample],
    pois: &[PoiPoint],
    od: &ODMatrix,
) -> Result<FeatureTable> {
    if od.dim != grid.len() {
        return Err(Error::data(format!(
            "OD dimension {} does not match grid location count {}",
            od.dim,
            grid.len()
        )));
    }
    let counts = aggregate_population(grid, raster);
    let poi = poi_histogram(grid, pois);
    let (popularity, rank_class) = popularity_rank(od);
    assemble_features(grid, &counts, &poi, &popularity, &rank_class)
}

// ---------------------------------------------------------------------------
// CSV interfaces

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> Option<T> {
    rec.get(i).and_then(|s| s.trim().parse().ok())
}

/// Read `lat,lon,count` rows; a leading non-numeric header line is skipped.
pub fn read_population_csv(path: &Path) -> Result<Vec<PopSample>> {
    let mut out = Vec::new();
    for (n, rec) in open_csv(path)?.records().enumerate() {
        let rec = rec.map_err(|e| Error::data(format!("population csv: {e}")))?;
        let lat: Option<f64> = parse_field(&rec, 0);
        match (lat, parse_field(&rec, 1), parse_field(&rec, 2)) {
            (Some(lat), Some(lon), Some(count)) => {
                out.push(PopSample { pos: LatLon::new(lat, lon), count })
            }
            _ if n == 0 => continue, // header
            _ => return Err(Error::data(format!("population csv: bad row {}", n + 1))),
        }
    }
    Ok(out)
}

/// Read `lat,lon,category` rows; categories must lie in [0, 33].
pub fn read_poi_csv(path: &Path) -> Result<Vec<PoiPoint>> {
    let mut out = Vec::new();
    for (n, rec) in open_csv(path)?.records().enumerate() {
        let rec = rec.map_err(|e| Error::data(format!("poi csv: {e}")))?;
        let lat: Option<f64> = parse_field(&rec, 0);
        match (lat, parse_field(&rec, 1), parse_field::<u8>(&rec, 2)) {
            (Some(lat), Some(lon), Some(cat)) => {
                if cat as usize >= POI_DIM {
                    return Err(Error::data(format!("poi csv: category {cat} out of range")));
                }
                out.push(PoiPoint { pos: LatLon::new(lat, lon), category: cat });
            }
            _ if n == 0 => continue,
            _ => return Err(Error::data(format!("poi csv: bad row {}", n + 1))),
        }
    }
    Ok(out)
}

/// Read `origin_index,dest_index,flow` rows into an `m × m` matrix.
/// Rows referencing indices outside the grid are rejected.
pub fn read_od_csv(path: &Path, m: usize) -> Result<ODMatrix> {
    let mut od = ODMatrix::zeros(m);
    for (n, rec) in open_csv(path)?.records().enumerate() {
        let rec = rec.map_err(|e| Error::data(format!("od csv: {e}")))?;
        let o: Option<usize> = parse_field(&rec, 0);
        match (o, parse_field::<usize>(&rec, 1), parse_field::<f64>(&rec, 2)) {
            (Some(o), Some(d), Some(f)) => {
                if o >= m || d >= m {
                    return Err(Error::data(format!(
                        "od csv row {}: location index {} outside grid of {m}",
                        n + 1,
                        o.max(d)
                    )));
                }
                if f < 0.0 {
                    return Err(Error::data(format!("od csv row {}: negative flow", n + 1)));
                }
                od.add(o, d, f);
            }
            _ if n == 0 => continue,
            _ => return Err(Error::data(format!("od csv: bad row {}", n + 1))),
        }
    }
    Ok(od)
}

/// Write nonzero OD entries as `origin_index,dest_index,flow` with a header.
pub fn write_od_csv(path: &Path, od: &ODMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(e.to_string()))?;
    w.write_record(["origin_index", "dest_index", "flow"])
        .map_err(|e| Error::data(e.to_string()))?;
    for i in 0..od.dim {
        for j in 0..od.dim {
            let f = od.get(i, j);
            if f != 0.0 {
                w.write_record([i.to_string(), j.to_string(), f.to_string()])
                    .map_err(|e| Error::data(e.to_string()))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
