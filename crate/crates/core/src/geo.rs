//! City boundaries and 1 km grid tessellation.
//!
//! A [`CityBoundary`] is parsed from GeoJSON, tessellated into a row-major
//! grid of square cells in a local equirectangular projection, and every cell
//! whose center falls inside the boundary becomes an indexed [`Location`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kilometres per degree of latitude.
pub const KM_PER_DEG_LAT: f64 = 111.32;

/// Mean Earth radius in km, used for great-circle distances.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Self {
        LatLon { lat, lon }
    }
}

/// Great-circle distance between two points in km (haversine).
pub fn haversine_km(a: LatLon, b: LatLon) -> f64 {
    let (la1, la2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = la2 - la1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + la1.cos() * la2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().asin()
}

/// City outline in WGS84 degrees: outer rings and holes, all closed.
///
/// Ring roles are not tracked; membership uses the even-odd rule, which
/// excludes holes and handles disjoint outer rings uniformly.
#[derive(Debug, Clone)]
pub struct CityBoundary {
    pub name: String,
    pub rings: Vec<Vec<LatLon>>,
}

impl CityBoundary {
    /// Even-odd point membership; points on an edge or vertex count as inside.
    pub fn contains(&self, p: LatLon) -> bool {
        let (x, y) = (p.lon, p.lat);
        for ring in &self.rings {
            for w in ring.windows(2) {
                if on_segment(x, y, w[0].lon, w[0].lat, w[1].lon, w[1].lat) {
                    return true;
                }
            }
        }
        let mut inside = false;
        for ring in &self.rings {
            for w in ring.windows(2) {
                let (x1, y1, x2, y2) = (w[0].lon, w[0].lat, w[1].lon, w[1].lat);
                if (y1 > y) != (y2 > y) && x < x1 + (y - y1) / (y2 - y1) * (x2 - x1) {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Minimum bounding rectangle as (southwest, northeast) corners.
    pub fn bbox(&self) -> (LatLon, LatLon) {
        let mut sw = LatLon::new(f64::INFINITY, f64::INFINITY);
        let mut ne = LatLon::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for ring in &self.rings {
            for p in ring {
                sw.lat = sw.lat.min(p.lat);
                sw.lon = sw.lon.min(p.lon);
                ne.lat = ne.lat.max(p.lat);
                ne.lon = ne.lon.max(p.lon);
            }
        }
        (sw, ne)
    }
}

fn on_segment(x: f64, y: f64, x1: f64, y1: f64, x2: f64, y2: f64) -> bool {
    // ~1e-9 degrees is well under a millimetre; exact for axis-aligned edges.
    const EPS: f64 = 1e-9;
    let cross = (x2 - x1) * (y - y1) - (x - x1) * (y2 - y1);
    cross.abs() <= EPS
        && x >= x1.min(x2) - EPS
        && x <= x1.max(x2) + EPS
        && y >= y1.min(y2) - EPS
        && y <= y1.max(y2) + EPS
}

/// Parse a GeoJSON document into a boundary.
///
/// Accepts a bare (Multi)Polygon geometry, a Feature wrapping one, or a
/// FeatureCollection (first polygonal feature wins). The feature's `name`
/// property, when present, becomes the boundary name.
pub fn load_boundary(geojson: &str) -> Result<CityBoundary> {
    let value: serde_json::Value = serde_json::from_str(geojson)?;
    let (geometry, name) = find_geometry(&value)?;
    let gtype = geometry
        .get("type")
        .and_then(|t| t.as_str())
        .ok_or_else(|| Error::data("geometry has no type"))?;
    let coords = geometry
        .get("coordinates")
        .ok_or_else(|| Error::data("geometry has no coordinates"))?;

    let mut rings = Vec::new();
    match gtype {
        "Polygon" => collect_polygon(coords, &mut rings)?,
        "MultiPolygon" => {
            for poly in as_array(coords)? {
                collect_polygon(poly, &mut rings)?;
            }
        }
        other => return Err(Error::data(format!("unsupported geometry type {other:?}"))),
    }
    if rings.is_empty() {
        return Err(Error::data("geometry has no rings"));
    }

    let area: f64 = rings.iter().map(|r| ring_area_deg2(r).abs()).sum();
    if area <= 0.0 {
        return Err(Error::data("degenerate zero-area geometry"));
    }
    Ok(CityBoundary { name, rings })
}

fn find_geometry(value: &serde_json::Value) -> Result<(&serde_json::Value, String)> {
    let name_of = |v: &serde_json::Value| {
        v.get("properties")
            .and_then(|p| p.get("name"))
            .and_then(|n| n.as_str())
            .unwrap_or("")
            .to_string()
    };
    match value.get("type").and_then(|t| t.as_str()) {
        Some("FeatureCollection") => {
            for feature in as_array(value.get("features").unwrap_or(&serde_json::Value::Null))? {
                if let Some(geom) = feature.get("geometry") {
                    let is_poly = matches!(
                        geom.get("type").and_then(|t| t.as_str()),
                        Some("Polygon" | "MultiPolygon")
                    );
                    if is_poly {
                        return Ok((geom, name_of(feature)));
                    }
                }
            }
            Err(Error::data("no polygonal feature in collection"))
        }
        Some("Feature") => {
            let geom = value
                .get("geometry")
                .ok_or_else(|| Error::data("feature has no geometry"))?;
            Ok((geom, name_of(value)))
        }
        Some(_) => Ok((value, String::new())),
        None => Err(Error::data("not a GeoJSON value")),
    }
}

fn as_array(v: &serde_json::Value) -> Result<&Vec<serde_json::Value>> {
    v.as_array().ok_or_else(|| Error::data("expected JSON array"))
}

fn collect_polygon(coords: &serde_json::Value, rings: &mut Vec<Vec<LatLon>>) -> Result<()> {
    for ring_json in as_array(coords)? {
        let mut ring = Vec::new();
        for pos in as_array(ring_json)? {
            let pos = as_array(pos)?;
            if pos.len() < 2 {
                return Err(Error::data("position needs lon and lat"));
            }
            let lon = pos[0].as_f64().ok_or_else(|| Error::data("non-numeric lon"))?;
            let lat = pos[1].as_f64().ok_or_else(|| Error::data("non-numeric lat"))?;
            ring.push(LatLon::new(lat, lon));
        }
        if ring.len() < 3 {
            return Err(Error::data("ring has fewer than 3 vertices"));
        }
        if ring.first() != ring.last() {
            ring.push(ring[0]); // tolerate unclosed input rings
        }
        rings.push(ring);
    }
    Ok(())
}

fn ring_area_deg2(ring: &[LatLon]) -> f64 {
    let s: f64 = ring
        .windows(2)
        .map(|w| w[0].lon * w[1].lat - w[1].lon * w[0].lat)
        .sum();
    0.5 * s
}

/// One kept grid cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Location {
    pub index: u32,
    pub row: u32,
    pub col: u32,
    pub center: LatLon,
    /// Position inside the boundary's bounding rectangle, normalized to [0,1]².
    pub local_uv: [f64; 2],
}

/// Tessellation of a boundary into indexed square cells.
///
/// Cells live in a local equirectangular projection anchored at the bounding
/// rectangle's southwest corner (`origin`), with longitudes scaled by
/// `cos(ref_lat)`. Indices are dense, row-major from the southwest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CityGrid {
    pub name: String,
    pub cell_size_m: f64,
    pub origin: LatLon,
    /// Reference latitude of the projection (bounding-rectangle midpoint).
    pub ref_lat: f64,
    pub n_rows: u32,
    pub n_cols: u32,
    /// Bounding-rectangle extent in metres, (east, north).
    pub rect_m: [f64; 2],
    pub locations: Vec<Location>,
}

impl CityGrid {
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    fn m_per_deg_lon(&self) -> f64 {
        KM_PER_DEG_LAT * 1000.0 * self.ref_lat.to_radians().cos()
    }

    /// Metres east/north of the bounding rectangle's southwest corner.
    pub fn project(&self, p: LatLon) -> (f64, f64) {
        let x = (p.lon - self.origin.lon) * self.m_per_deg_lon();
        let y = (p.lat - self.origin.lat) * KM_PER_DEG_LAT * 1000.0;
        (x, y)
    }

    pub fn unproject(&self, x_m: f64, y_m: f64) -> LatLon {
        LatLon::new(
            self.origin.lat + y_m / (KM_PER_DEG_LAT * 1000.0),
            self.origin.lon + x_m / self.m_per_deg_lon(),
        )
    }

    /// Index of the cell containing the point, if that cell is a location.
    /// Points on a shared cell edge resolve to the smaller index.
    pub fn locate(&self, p: LatLon) -> Option<u32> {
        let (x, y) = self.project(p);
        let col = axis_cell(x, self.cell_size_m, self.n_cols)?;
        let row = axis_cell(y, self.cell_size_m, self.n_rows)?;
        self.location_at(row, col)
    }

    /// Look up a kept cell by grid coordinates.
    pub fn location_at(&self, row: u32, col: u32) -> Option<u32> {
        self.locations
            .binary_search_by_key(&(row, col), |l| (l.row, l.col))
            .ok()
            .map(|i| self.locations[i].index)
    }

    /// Projected centre of a location in km east/north of the origin.
    pub fn xy_km(&self, index: u32) -> (f64, f64) {
        let l = &self.locations[index as usize];
        (
            (l.col as f64 + 0.5) * self.cell_size_m / 1000.0,
            (l.row as f64 + 0.5) * self.cell_size_m / 1000.0,
        )
    }

    /// Euclidean distance between two location centres in the projection, km.
    pub fn distance_km(&self, i: u32, j: u32) -> f64 {
        let (xi, yi) = self.xy_km(i);
        let (xj, yj) = self.xy_km(j);
        ((xi - xj).powi(2) + (yi - yj).powi(2)).sqrt()
    }
}

/// Cell index along one axis; integer `x/cell` (a shared edge) belongs to the
/// lower cell so that edge ties resolve to the smaller location index.
fn axis_cell(x_m: f64, cell_m: f64, n: u32) -> Option<u32> {
    let mut t = x_m / cell_m;
    let nearest = t.round();
    if (t - nearest).abs() < 1e-9 {
        t = nearest;
    }
    if t < 0.0 {
        return None;
    }
    let c = if t == t.trunc() && t > 0.0 {
        t as i64 - 1
    } else {
        t.floor() as i64
    };
    (c < n as i64).then_some(c as u32)
}

/// Tessellate a boundary into `cell_size_m` cells.
///
/// A cell is kept iff its centre lies inside the boundary (even-odd rule, so
/// holes are excluded). A boundary too small to capture any cell centre still
/// yields one location: the cell containing the rectangle midpoint.
pub fn build_grid(boundary: &CityBoundary, cell_size_m: f64) -> Result<CityGrid> {
    if !(cell_size_m > 0.0) {
        return Err(Error::config("cell_size_m must be positive"));
    }
    let (sw, ne) = boundary.bbox();
    let ref_lat = 0.5 * (sw.lat + ne.lat);
    let rect_w = (ne.lon - sw.lon) * KM_PER_DEG_LAT * 1000.0 * ref_lat.to_radians().cos();
    let rect_h = (ne.lat - sw.lat) * KM_PER_DEG_LAT * 1000.0;
    let n_cols = ((rect_w / cell_size_m).ceil() as u32).max(1);
    let n_rows = ((rect_h / cell_size_m).ceil() as u32).max(1);

    let mut grid = CityGrid {
        name: boundary.name.clone(),
        cell_size_m,
        origin: sw,
        ref_lat,
        n_rows,
        n_cols,
        rect_m: [rect_w, rect_h],
        locations: Vec::new(),
    };

    let mut cells = Vec::new();
    for row in 0..n_rows {
        for col in 0..n_cols {
            let x = (col as f64 + 0.5) * cell_size_m;
            let y = (row as f64 + 0.5) * cell_size_m;
            if boundary.contains(grid.unproject(x, y)) {
                cells.push((row, col));
            }
        }
    }
    if cells.is_empty() {
        let row = ((rect_h / 2.0 / cell_size_m) as u32).min(n_rows - 1);
        let col = ((rect_w / 2.0 / cell_size_m) as u32).min(n_cols - 1);
        cells.push((row, col));
    }

    for (index, (row, col)) in cells.into_iter().enumerate() {
        let x = (col as f64 + 0.5) * cell_size_m;
        let y = (row as f64 + 0.5) * cell_size_m;
        let u = if n_cols == 1 { 0.5 } else { (x / rect_w).clamp(0.0, 1.0) };
        let v = if n_rows == 1 { 0.5 } else { (y / rect_h).clamp(0.0, 1.0) };
        grid.locations.push(Location {
            index: index as u32,
            row,
            col,
            center: grid.unproject(x, y),
            local_uv: [u, v],
        });
    }
    Ok(grid)
}
