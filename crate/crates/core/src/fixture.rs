//! Built-in fixture cities.
//!
//! Three small synthetic cities carrying the same input surface a real
//! deployment has — boundary polygon, population raster, categorized POI
//! points and a commuting OD matrix — so the whole pipeline can run end to
//! end without licensed data. City A is the 20×20 two-blob workhorse (the
//! layout the oracle walkers are validated on); B and C differ in footprint,
//! hemisphere and land-use texture for transfer experiments.

use std::path::{Path, PathBuf};

use crate::features::{
    build_feature_table, write_od_csv, FeatureTable, ODMatrix, PoiPoint, PopSample,
};
use crate::geo::{build_grid, load_boundary, CityGrid};
use crate::{Error, Result, POI_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixtureKind {
    A,
    B,
    C,
}

impl FixtureKind {
    pub const ALL: [FixtureKind; 3] = [FixtureKind::A, FixtureKind::B, FixtureKind::C];

    pub fn name(self) -> &'static str {
        match self {
            FixtureKind::A => "city_a",
            FixtureKind::B => "city_b",
            FixtureKind::C => "city_c",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "a" | "city_a" => Ok(FixtureKind::A),
            "b" | "city_b" => Ok(FixtureKind::B),
            "c" | "city_c" => Ok(FixtureKind::C),
            other => Err(Error::config(format!(
                "unknown fixture city `{other}` (expected city_a, city_b or city_c)"
            ))),
        }
    }
}

/// A fully materialized fixture: raw inputs plus the derived grid and table.
#[derive(Debug, Clone)]
pub struct FixtureCity {
    pub kind: FixtureKind,
    pub boundary_geojson: String,
    pub grid: CityGrid,
    pub population: Vec<PopSample>,
    pub pois: Vec<PoiPoint>,
    pub od: ODMatrix,
    pub table: FeatureTable,
}

/// Rectangular boundary for a kind. The extents are picked so the row of
/// cell centres at `n − 0.5` km is the last one inside the rectangle.
pub fn boundary_geojson(kind: FixtureKind) -> String {
    let (lon0, lat0, dlon, dlat) = match kind {
        // 20 × 20 cells at the equator
        FixtureKind::A => (0.0, 0.0, 0.1808, 0.1808),
        // 26 × 14, an east-west corridor
        FixtureKind::B => (1.0, 0.3, 0.2336, 0.1258),
        // 23 × 17 in the southern hemisphere
        FixtureKind::C => (2.0, -0.4, 0.2066, 0.1527),
    };
    format!(
        r#"{{
  "type": "FeatureCollection",
  "features": [{{
    "type": "Feature",
    "properties": {{"name": "{name}"}},
    "geometry": {{"type": "Polygon", "coordinates": [[
      [{lon0}, {lat0}], [{lon1}, {lat0}], [{lon1}, {lat1}], [{lon0}, {lat1}], [{lon0}, {lat0}]
    ]]}}
  }}]
}}
"#,
        name = kind.name(),
        lon1 = lon0 + dlon,
        lat1 = lat0 + dlat,
    )
}

fn gauss(x: f64, y: f64, cx: f64, cy: f64, s: f64) -> f64 {
    (-((x - cx).powi(2) + (y - cy).powi(2)) / s).exp()
}

/// Residents per cell; integers so the CSV round trip is exact.
fn population_at(kind: FixtureKind, x: f64, y: f64) -> f64 {
    let p = match kind {
        FixtureKind::A => {
            1000.0 * gauss(x, y, 6.0, 6.0, 18.0) + 600.0 * gauss(x, y, 14.0, 14.0, 18.0) + 5.0
        }
        FixtureKind::B => {
            950.0 * gauss(x, y, 4.0, 7.0, 10.0)
                + 550.0 * gauss(x, y, 13.0, 7.0, 16.0)
                + 780.0 * gauss(x, y, 22.0, 7.0, 10.0)
                + 4.0
        }
        FixtureKind::C => {
            1150.0 * gauss(x, y, 17.0, 5.0, 22.0) + 480.0 * gauss(x, y, 6.0, 12.0, 9.0) + 6.0
        }
    };
    p.round()
}

/// Archetype bump on the 34-category axis.
fn bump(cat: usize, center: f64, width: f64) -> f64 {
    let d = cat as f64 - center;
    (-d * d / (2.0 * width * width)).exp()
}

/// Land-use mixture for a cell: (weight, category center, width) per archetype.
/// Category bands: ~4 residential, ~12 commercial, ~21 industrial, ~25
/// transit, ~29 leisure.
fn poi_mix(kind: FixtureKind, x: f64, y: f64) -> Vec<(f64, f64, f64)> {
    match kind {
        FixtureKind::A => {
            let down = gauss(x, y, 6.0, 6.0, 18.0);
            let sub = gauss(x, y, 14.0, 14.0, 18.0);
            let rim = ((x - 10.0).abs().max((y - 10.0).abs()) / 10.0).powi(2);
            vec![
                (0.25 + 1.3 * down, 12.0, 4.0),
                (0.45 + 1.1 * sub, 4.0, 3.0),
                (0.18, 29.0, 4.0),
                (0.12 + 0.5 * rim, 21.0, 3.0),
            ]
        }
        FixtureKind::B => {
            let hub = gauss(x, y, 4.0, 7.0, 6.0)
                + gauss(x, y, 13.0, 7.0, 6.0)
                + gauss(x, y, 22.0, 7.0, 6.0);
            let corr = (-((y - 7.0).powi(2)) / 8.0).exp();
            let south = 1.0 - y / 14.0;
            vec![
                (0.2 + 1.2 * hub, 12.0, 4.0),
                (0.5 + 0.8 * (1.0 - corr), 4.0, 3.0),
                (0.15 + 0.55 * corr, 25.0, 2.5),
                (0.1 + 0.45 * south, 21.0, 3.0),
            ]
        }
        FixtureKind::C => {
            let port = gauss(x, y, 17.0, 5.0, 22.0);
            let old = gauss(x, y, 6.0, 12.0, 9.0);
            vec![
                (0.3 + 1.0 * port, 21.0, 3.5),
                (0.25 + 0.9 * port, 12.0, 4.0),
                (0.45 + 0.9 * old, 4.0, 3.0),
                (0.12 + 0.7 * old, 29.0, 4.0),
            ]
        }
    }
}

/// Integer POI counts per category for a mixture and a target total.
fn poi_counts(mix: &[(f64, f64, f64)], total: f64) -> Vec<u32> {
    let mut w = vec![0.0; POI_DIM];
    for (c, v) in w.iter_mut().enumerate() {
        for &(wt, ctr, wd) in mix {
            *v += wt * bump(c, ctr, wd);
        }
    }
    let s: f64 = w.iter().sum();
    w.iter().map(|v| (v / s * total).round() as u32).collect()
}

/// Gravity commuting flows `p_i·p_j / (1 + d²)`, scaled so the busiest pair
/// carries ~420 commuters and everything below half a commuter drops out.
fn gravity_od(grid: &CityGrid, pop: &[f64]) -> ODMatrix {
    let m = grid.len();
    let mut raw = vec![0.0; m * m];
    let mut max = 0.0f64;
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let d = grid.distance_km(i as u32, j as u32);
            let f = pop[i] * pop[j] / (1.0 + d * d);
            raw[i * m + j] = f;
            max = max.max(f);
        }
    }
    let scale = 420.0 / max;
    let mut od = ODMatrix::zeros(m);
    for i in 0..m {
        for j in 0..m {
            let f = (raw[i * m + j] * scale).round();
            if f > 0.0 {
                od.add(i, j, f);
            }
        }
    }
    od
}

/// Materialize a fixture city. Pure function of `kind`.
pub fn fixture_city(kind: FixtureKind) -> FixtureCity {
    let geojson = boundary_geojson(kind);
    let boundary = load_boundary(&geojson).expect("fixture boundary is valid");
    let grid = build_grid(&boundary, 1000.0).expect("fixture grid builds");
    let m = grid.len();

    let mut pop = vec![0.0; m];
    for (i, v) in pop.iter_mut().enumerate() {
        let (x, y) = grid.xy_km(i as u32);
        *v = population_at(kind, x, y);
    }
    let pmax = pop.iter().cloned().fold(0.0, f64::max);

    let mut samples = Vec::with_capacity(m);
    let mut pois = Vec::new();
    for i in 0..m {
        let center = grid.locations[i].center;
        samples.push(PopSample { pos: center, count: pop[i] });
        let (x, y) = grid.xy_km(i as u32);
        let total = 5.0 + 18.0 * pop[i] / pmax;
        for (cat, &n) in poi_counts(&poi_mix(kind, x, y), total).iter().enumerate() {
            for _ in 0..n {
                pois.push(PoiPoint { pos: center, category: cat as u8 });
            }
        }
    }

    let od = gravity_od(&grid, &pop);
    let table = build_feature_table(&grid, &samples, &pois, &od).expect("fixture table assembles");
    FixtureCity { kind, boundary_geojson: geojson, grid, population: samples, pois, od, table }
}

/// Input files as a deployment would provide them.
#[derive(Debug, Clone)]
pub struct FixtureFiles {
    pub boundary: PathBuf,
    pub population: PathBuf,
    pub poi: PathBuf,
    pub od: PathBuf,
}

/// Write the city's raw inputs into `dir` (boundary.geojson, population.csv,
/// poi.csv, od.csv). Rerunning produces byte-identical files.
pub fn write_fixture_inputs(city: &FixtureCity, dir: &Path) -> Result<FixtureFiles> {
    std::fs::create_dir_all(dir)?;
    let files = FixtureFiles {
        boundary: dir.join("boundary.geojson"),
        population: dir.join("population.csv"),
        poi: dir.join("poi.csv"),
        od: dir.join("od.csv"),
    };
    std::fs::write(&files.boundary, &city.boundary_geojson)?;

    let mut w = csv::Writer::from_path(&files.population).map_err(|e| Error::data(e.to_string()))?;
    w.write_record(["lat", "lon", "count"]).map_err(|e| Error::data(e.to_string()))?;
    for s in &city.population {
        w.write_record([s.pos.lat.to_string(), s.pos.lon.to_string(), s.count.to_string()])
            .map_err(|e| Error::data(e.to_string()))?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(&files.poi).map_err(|e| Error::data(e.to_string()))?;
    w.write_record(["lat", "lon", "category"]).map_err(|e| Error::data(e.to_string()))?;
    for p in &city.pois {
        w.write_record([p.pos.lat.to_string(), p.pos.lon.to_string(), p.category.to_string()])
            .map_err(|e| Error::data(e.to_string()))?;
    }
    w.flush()?;

    write_od_csv(&files.od, &city.od)?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{read_od_csv, read_poi_csv, read_population_csv};

    /// Kept footprint (the covering grid may carry one extra partial row/col
    /// whose centres fall outside the rectangle).
    fn kept(c: &FixtureCity) -> (u32, u32, usize) {
        let rows = c.grid.locations.iter().map(|l| l.row).max().unwrap() + 1;
        let cols = c.grid.locations.iter().map(|l| l.col).max().unwrap() + 1;
        (rows, cols, c.grid.len())
    }

    #[test]
    fn footprints_are_frozen() {
        assert_eq!(kept(&fixture_city(FixtureKind::A)), (20, 20, 400));
        assert_eq!(kept(&fixture_city(FixtureKind::B)), (14, 26, 364));
        assert_eq!(kept(&fixture_city(FixtureKind::C)), (17, 23, 391));
    }

    #[test]
    fn build_is_deterministic() {
        let x = fixture_city(FixtureKind::B);
        let y = fixture_city(FixtureKind::B);
        assert_eq!(x.table.features, y.table.features);
        assert_eq!(x.od.flows, y.od.flows);
        assert_eq!(x.pois.len(), y.pois.len());
    }

    #[test]
    fn csv_inputs_reproduce_the_table() {
        for kind in FixtureKind::ALL {
            let city = fixture_city(kind);
            let dir = tempfile::tempdir().unwrap();
            let files = write_fixture_inputs(&city, dir.path()).unwrap();

            let text = std::fs::read_to_string(&files.boundary).unwrap();
            let grid = build_grid(&load_boundary(&text).unwrap(), 1000.0).unwrap();
            assert_eq!(grid.len(), city.grid.len(), "{}", kind.name());

            let raster = read_population_csv(&files.population).unwrap();
            let pois = read_poi_csv(&files.poi).unwrap();
            let od = read_od_csv(&files.od, grid.len()).unwrap();
            let table = build_feature_table(&grid, &raster, &pois, &od).unwrap();
            assert_eq!(table.features, city.table.features, "{}", kind.name());
        }
    }

    #[test]
    fn rewrite_is_byte_identical() {
        let city = fixture_city(FixtureKind::A);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let f1 = write_fixture_inputs(&city, d1.path()).unwrap();
        let f2 = write_fixture_inputs(&city, d2.path()).unwrap();
        for (a, b) in [
            (&f1.boundary, &f2.boundary),
            (&f1.population, &f2.population),
            (&f1.poi, &f2.poi),
            (&f1.od, &f2.od),
        ] {
            assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
        }
    }

    #[test]
    fn cities_have_distinct_textures() {
        let a = fixture_city(FixtureKind::A);
        let b = fixture_city(FixtureKind::B);
        assert_ne!(a.grid.n_cols, b.grid.n_cols);
        // land-use mixes differ beyond size: compare the busiest cell's poi row
        let amax = (0..a.table.len()).max_by(|&i, &j| a.table.pop(i).total_cmp(&a.table.pop(j))).unwrap();
        let bmax = (0..b.table.len()).max_by(|&i, &j| b.table.pop(i).total_cmp(&b.table.pop(j))).unwrap();
        let diff: f64 = a
            .table
            .poi(amax)
            .iter()
            .zip(b.table.poi(bmax))
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 0.05, "poi textures too similar: {diff}");
    }

    #[test]
    fn gravity_od_is_plausible() {
        let city = fixture_city(FixtureKind::A);
        assert!(city.od.total() > 0.0);
        for i in 0..city.grid.len() {
            assert_eq!(city.od.get(i, i), 0.0);
        }
        // popularity ranks must spread across classes, not collapse
        let distinct: std::collections::BTreeSet<u8> = city.table.rank_class.iter().cloned().collect();
        assert!(distinct.len() >= 5, "only {} rank classes in use", distinct.len());
    }
}
