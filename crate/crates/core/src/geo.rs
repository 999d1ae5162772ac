//! Geodetic coordinates, separation vectors, datasets and their file formats.
//!
//! Locations are stored as (latitude, longitude) in degrees. Kernels consume
//! [`Displacement`] vectors ordered `(Δlat, Δlon)`; synthetic data on the unit
//! square uses `lat` for the second axis and `lon` for the first.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use nalgebra::Vector2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeded_rng;

const EARTH_RADIUS_KM: f64 = 6371.0088;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Location {
    lat: f64,
    lon: f64,
}

impl Location {
    /// Builds a location, normalizing longitude into `[-180, 180)`.
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !lon.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(Error::InvalidLocation { lat, lon });
        }
        Ok(Self {
            lat,
            lon: wrap_degrees(lon),
        })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    fn key(&self) -> (u64, u64) {
        // +0.0 and -0.0 compare equal but differ in bits.
        ((self.lat + 0.0).to_bits(), (self.lon + 0.0).to_bits())
    }
}

/// Wraps an angle in degrees into `[-180, 180)`.
pub fn wrap_degrees(deg: f64) -> f64 {
    if (-180.0..180.0).contains(&deg) {
        return deg;
    }
    let w = (deg + 180.0).rem_euclid(360.0) - 180.0;
    if w >= 180.0 {
        w - 360.0
    } else {
        w
    }
}

/// How separation vectors between two locations are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricMode {
    /// Raw degree differences, longitude wrapped to the shorter arc.
    #[default]
    Euclidean,
    /// Longitude difference scaled by the cosine of the mean latitude.
    Equirectangular,
}

impl std::str::FromStr for MetricMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Self::Euclidean),
            "equirectangular" => Ok(Self::Equirectangular),
            other => Err(Error::InvalidConfig(format!("unknown metric mode `{other}`"))),
        }
    }
}

/// Local planar separation `(Δlat, Δlon)` between two locations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Displacement(pub Vector2<f64>);

impl Displacement {
    pub fn zero() -> Self {
        Self(Vector2::zeros())
    }

    pub fn new(dlat: f64, dlon: f64) -> Self {
        Self(Vector2::new(dlat, dlon))
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

pub fn displacement(a: &Location, b: &Location, mode: MetricMode) -> Displacement {
    let dlat = a.lat - b.lat;
    let dlon = wrap_degrees(a.lon - b.lon);
    match mode {
        MetricMode::Euclidean => Displacement::new(dlat, dlon),
        MetricMode::Equirectangular => {
            let mid = 0.5 * (a.lat + b.lat);
            Displacement::new(dlat, dlon * mid.to_radians().cos())
        }
    }
}

/// Great-circle distance in kilometres.
pub fn haversine_km(a: &Location, b: &Location) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dp = p2 - p1;
    let dl = (b.lon - a.lon).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Scalar distance used for neighbor search only; never inside a kernel.
pub fn neighbor_distance(a: &Location, b: &Location, mode: MetricMode) -> f64 {
    match mode {
        MetricMode::Euclidean => displacement(a, b, mode).norm(),
        MetricMode::Equirectangular => haversine_km(a, b),
    }
}

/// Indices of the `k` points nearest to `query`, closest first.
///
/// Ties are broken by index so the result is deterministic.
pub fn nearest_neighbors(
    locations: &[Location],
    query: &Location,
    k: usize,
    mode: MetricMode,
) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = locations
        .iter()
        .enumerate()
        .map(|(i, loc)| (neighbor_distance(query, loc, mode), i))
        .collect();
    let k = k.min(scored.len());
    let by_distance = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k, by_distance);
        scored.truncate(k);
    }
    scored.sort_by(by_distance);
    scored.into_iter().map(|(_, i)| i).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialDataset {
    locations: Vec<Location>,
    values: Vec<f64>,
    /// Observation noise standard deviation, when known (synthetic data).
    pub noise_sd: Option<f64>,
}

impl SpatialDataset {
    pub fn new(locations: Vec<Location>, values: Vec<f64>) -> Result<Self> {
        if locations.len() != values.len() {
            return Err(Error::BadDataset(format!(
                "{} locations but {} values",
                locations.len(),
                values.len()
            )));
        }
        if locations.is_empty() {
            return Err(Error::BadDataset("dataset is empty".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::BadDataset(format!("non-finite value {v}")));
        }
        let mut seen = HashSet::with_capacity(locations.len());
        for loc in &locations {
            if !seen.insert(loc.key()) {
                return Err(Error::DuplicateLocation {
                    lat: loc.lat,
                    lon: loc.lon,
                });
            }
        }
        Ok(Self {
            locations,
            values,
            noise_sd: None,
        })
    }

    pub fn with_noise_sd(mut self, sd: f64) -> Self {
        self.noise_sd = Some(sd);
        self
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn locations(&self) -> &[Location] {
        &self.locations
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Same locations, different values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.len() {
            return Err(Error::BadDataset("value count changed".into()));
        }
        Ok(Self {
            locations: self.locations.clone(),
            values,
            noise_sd: self.noise_sd,
        })
    }

    /// Subset by index, preserving the given order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let locations = idx.iter().map(|&i| self.locations[i]).collect();
        let values = idx.iter().map(|&i| self.values[i]).collect();
        let mut out = Self::new(locations, values)?;
        out.noise_sd = self.noise_sd;
        Ok(out)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationRecord {
    pub station_id: String,
    pub location: Location,
    /// `(year, level_mm)`, strictly increasing in year.
    pub series: Vec<(i32, f64)>,
}

/// Ordinary least-squares slope of level against year (mm/year).
pub fn fit_station_rate(record: &StationRecord) -> Result<f64> {
    let s = &record.series;
    if s.len() < 2 {
        return Err(Error::DegenerateSeries);
    }
    let n = s.len() as f64;
    let x_bar = s.iter().map(|&(y, _)| y as f64).sum::<f64>() / n;
    let y_bar = s.iter().map(|&(_, v)| v).sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for &(year, level) in s {
        let dx = year as f64 - x_bar;
        sxx += dx * dx;
        sxy += dx * (level - y_bar);
    }
    if sxx == 0.0 {
        return Err(Error::DegenerateSeries);
    }
    Ok(sxy / sxx)
}

/// Per-station trend rates as a dataset.
pub fn rates_from_stations(stations: &[StationRecord]) -> Result<SpatialDataset> {
    let mut locations = Vec::with_capacity(stations.len());
    let mut values = Vec::with_capacity(stations.len());
    for s in stations {
        locations.push(s.location);
        values.push(fit_station_rate(s)?);
    }
    SpatialDataset::new(locations, values)
}

/// Seeded random partition into `n_train` training and `n - n_train` test points.
pub fn train_test_split(
    data: &SpatialDataset,
    n_train: usize,
    seed: u64,
) -> Result<(SpatialDataset, SpatialDataset)> {
    let n = data.len();
    if n_train == 0 || n_train >= n {
        return Err(Error::BadSplit { n, n_train });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded_rng(seed));
    let (train, test) = idx.split_at_mut(n_train);
    train.sort_unstable();
    test.sort_unstable();
    Ok((data.subset(train)?, data.subset(test)?))
}

pub(crate) fn parse_field<T: std::str::FromStr>(
    path: &Path,
    line: u64,
    column: &str,
    raw: Option<&str>,
) -> Result<T> {
    let raw = raw.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line,
        column: column.to_string(),
        message: "missing field".into(),
    })?;
    raw.trim().parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        column: column.to_string(),
        message: format!("cannot parse `{raw}`"),
    })
}

pub(crate) fn check_header(path: &Path, reader: &mut csv::Reader<std::fs::File>, expected: &[&str]) -> Result<()> {
    let headers = reader.headers()?;
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            column: "header".into(),
            message: format!("expected `{}`, found `{}`", expected.join(","), got.join(",")),
        });
    }
    Ok(())
}

pub(crate) fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?)
}

pub(crate) fn location_at(path: &Path, line: u64, lat: f64, lon: f64) -> Result<Location> {
    Location::new(lat, lon).map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        column: "lat_deg,lon_deg".into(),
        message: format!("({lat}, {lon}) is not a valid location"),
    })
}

pub const RATES_HEADER: [&str; 3] = ["lat_deg", "lon_deg", "rate_mm_per_yr"];
pub const STATION_HEADER: [&str; 5] = ["station_id", "lat_deg", "lon_deg", "year", "level_mm"];
pub const PREDICTIONS_HEADER: [&str; 4] = ["lat_deg", "lon_deg", "pred_mean", "pred_sd"];

/// Reads a `lat_deg,lon_deg,rate_mm_per_yr` file.
pub fn load_rates_csv(path: impl AsRef<Path>) -> Result<SpatialDataset> {
    let path = path.as_ref();
    let mut reader = open_csv(path)?;
    check_header(path, &mut reader, &RATES_HEADER)?;
    let mut locations = Vec::new();
    let mut values = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = row as u64 + 2;
        let lat = parse_field(path, line, "lat_deg", record.get(0))?;
        let lon = parse_field(path, line, "lon_deg", record.get(1))?;
        let value = parse_field(path, line, "rate_mm_per_yr", record.get(2))?;
        locations.push(location_at(path, line, lat, lon)?);
        values.push(value);
    }
    SpatialDataset::new(locations, values)
}

pub fn write_rates_csv(path: impl AsRef<Path>, data: &SpatialDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RATES_HEADER)?;
    for (loc, v) in data.locations().iter().zip(data.values()) {
        w.write_record([loc.lat.to_string(), loc.lon.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads test locations from any CSV whose first two columns are `lat_deg,lon_deg`.
pub fn load_locations_csv(path: impl AsRef<Path>) -> Result<Vec<Location>> {
    let path = path.as_ref();
    let mut reader = open_csv(path)?;
    {
        let headers = reader.headers()?;
        if headers.get(0).map(str::trim) != Some("lat_deg")
            || headers.get(1).map(str::trim) != Some("lon_deg")
        {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                column: "header".into(),
                message: "first columns must be `lat_deg,lon_deg`".into(),
            });
        }
    }
    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = row as u64 + 2;
        let lat = parse_field(path, line, "lat_deg", record.get(0))?;
        let lon = parse_field(path, line, "lon_deg", record.get(1))?;
        out.push(location_at(path, line, lat, lon)?);
    }
    Ok(out)
}

/// Outcome of reading a station file with a temporal coverage window.
#[derive(Debug, Clone, PartialEq)]
pub struct StationLoad {
    pub stations: Vec<StationRecord>,
    /// Stations whose records do not span the window.
    pub dropped: usize,
}

/// Reads a `station_id,lat_deg,lon_deg,year,level_mm` file.
///
/// With `window = Some((first, last))`, stations whose years do not cover
/// `first..=last` are dropped and counted.
pub fn load_station_csv(path: impl AsRef<Path>, window: Option<(i32, i32)>) -> Result<StationLoad> {
    let path = path.as_ref();
    if std::fs::metadata(path)?.len() == 0 {
        return Ok(StationLoad {
            stations: Vec::new(),
            dropped: 0,
        });
    }
    let mut reader = open_csv(path)?;
    check_header(path, &mut reader, &STATION_HEADER)?;
    let mut groups: BTreeMap<String, (u64, Location, Vec<(i32, f64)>)> = BTreeMap::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = row as u64 + 2;
        let id: String = parse_field(path, line, "station_id", record.get(0))?;
        let lat = parse_field(path, line, "lat_deg", record.get(1))?;
        let lon = parse_field(path, line, "lon_deg", record.get(2))?;
        let year = parse_field(path, line, "year", record.get(3))?;
        let level = parse_field(path, line, "level_mm", record.get(4))?;
        let loc = location_at(path, line, lat, lon)?;
        let entry = groups.entry(id).or_insert_with(|| (line, loc, Vec::new()));
        if entry.1 != loc {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                column: "lat_deg,lon_deg".into(),
                message: "station location changes between rows".into(),
            });
        }
        entry.2.push((year, level));
    }
    // Preserve first-appearance order of stations.
    let mut ordered: Vec<(String, (u64, Location, Vec<(i32, f64)>))> = groups.into_iter().collect();
    ordered.sort_by_key(|(_, (first_line, _, _))| *first_line);

    let mut stations = Vec::new();
    let mut dropped = 0;
    for (station_id, (first_line, location, mut series)) in ordered {
        series.sort_by_key(|&(y, _)| y);
        if series.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: first_line,
                column: "year".into(),
                message: format!("station `{station_id}` repeats a year"),
            });
        }
        if let Some((first, last)) = window {
            let covers = series.first().is_some_and(|&(y, _)| y <= first)
                && series.last().is_some_and(|&(y, _)| y >= last);
            if !covers {
                dropped += 1;
                continue;
            }
        }
        stations.push(StationRecord {
            station_id,
            location,
            series,
        });
    }
    Ok(StationLoad { stations, dropped })
}

pub fn write_station_csv(path: impl AsRef<Path>, stations: &[StationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(STATION_HEADER)?;
    for s in stations {
        for &(year, level) in &s.series {
            w.write_record([
                s.station_id.clone(),
                s.location.lat.to_string(),
                s.location.lon.to_string(),
                year.to_string(),
                level.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One row of a predictions file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionRow {
    pub location: Location,
    pub mean: f64,
    pub sd: f64,
}

pub fn write_predictions_csv(path: impl AsRef<Path>, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(PREDICTIONS_HEADER)?;
    for r in rows {
        w.write_record([
            r.location.lat.to_string(),
            r.location.lon.to_string(),
            r.mean.to_string(),
            r.sd.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_predictions_csv(path: impl AsRef<Path>) -> Result<Vec<PredictionRow>> {
    let path = path.as_ref();
    let mut reader = open_csv(path)?;
    check_header(path, &mut reader, &PREDICTIONS_HEADER)?;
    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = row as u64 + 2;
        let lat = parse_field(path, line, "lat_deg", record.get(0))?;
        let lon = parse_field(path, line, "lon_deg", record.get(1))?;
        let mean = parse_field(path, line, "pred_mean", record.get(2))?;
        let sd: f64 = parse_field(path, line, "pred_sd", record.get(3))?;
        out.push(PredictionRow {
            location: location_at(path, line, lat, lon)?,
            mean,
            sd,
        });
    }
    Ok(out)
}

/// Writes a small CSV with arbitrary header and pre-formatted rows.
pub(crate) fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "{}", header.join(","))?;
    for row in rows {
        writeln!(file, "{}", row.join(","))?;
    }
    file.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn loc(lat: f64, lon: f64) -> Location {
        Location::new(lat, lon).unwrap()
    }

    #[test]
    fn displacement_examples() {
        let o = loc(0.0, 0.0);
        assert_eq!(displacement(&o, &o, MetricMode::Euclidean), Displacement::zero());
        assert_eq!(
            displacement(&loc(10.0, 0.0), &o, MetricMode::Euclidean),
            Displacement::new(10.0, 0.0)
        );
        let d = displacement(&loc(60.0, 10.0), &loc(60.0, 0.0), MetricMode::Equirectangular);
        assert_abs_diff_eq!(d.0[0], 0.0);
        assert_abs_diff_eq!(d.0[1], 5.0, epsilon = 1e-12);
    }

    #[test]
    fn longitude_wraps_to_shorter_arc() {
        let d = displacement(&loc(0.0, 179.0), &loc(0.0, -179.0), MetricMode::Euclidean);
        assert_abs_diff_eq!(d.0[1], -2.0, epsilon = 1e-12);
        assert_eq!(loc(0.0, 180.0).lon(), -180.0);
        assert_eq!(loc(0.0, 540.0).lon(), -180.0);
        assert_abs_diff_eq!(loc(0.0, -190.0).lon(), 170.0);
    }

    #[test]
    fn rejects_bad_latitude() {
        assert!(matches!(Location::new(91.0, 0.0), Err(Error::InvalidLocation { .. })));
        assert!(Location::new(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn station_rate_examples() {
        let rec = |series: Vec<(i32, f64)>| StationRecord {
            station_id: "s".into(),
            location: loc(0.0, 0.0),
            series,
        };
        assert_abs_diff_eq!(
            fit_station_rate(&rec(vec![(2000, 0.0), (2001, 2.0), (2002, 4.0)])).unwrap(),
            2.0,
            epsilon = 1e-12
        );
        assert_eq!(fit_station_rate(&rec(vec![(2000, 5.0), (2001, 5.0)])).unwrap(), 0.0);
        // Normal equations by hand: Sxy = 4, Sxx = 5.
        assert_abs_diff_eq!(
            fit_station_rate(&rec(vec![(1993, 0.0), (1994, 1.0), (1995, 3.0), (1996, 2.0)])).unwrap(),
            0.8,
            epsilon = 1e-12
        );
        assert!(matches!(
            fit_station_rate(&rec(vec![(2000, 1.0)])),
            Err(Error::DegenerateSeries)
        ));
        assert!(matches!(
            fit_station_rate(&rec(vec![(2000, 1.0), (2000, 2.0)])),
            Err(Error::DegenerateSeries)
        ));
    }

    #[test]
    fn split_sizes_and_errors() {
        let locs: Vec<_> = (0..747).map(|i| loc((i / 40) as f64, (i % 40) as f64)).collect();
        let data = SpatialDataset::new(locs, vec![0.0; 747]).unwrap();
        let (tr, te) = train_test_split(&data, 374, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (374, 373));
        let (tr2, _) = train_test_split(&data, 374, 1).unwrap();
        assert_eq!(tr, tr2);

        let small = data.subset(&(0..10).collect::<Vec<_>>()).unwrap();
        assert!(matches!(train_test_split(&small, 10, 0), Err(Error::BadSplit { .. })));
        assert!(matches!(train_test_split(&small, 0, 0), Err(Error::BadSplit { .. })));
    }

    #[test]
    fn knn_is_sorted_and_includes_self() {
        let locs: Vec<_> = (0..25).map(|i| loc((i / 5) as f64, (i % 5) as f64)).collect();
        let nn = nearest_neighbors(&locs, &locs[12], 5, MetricMode::Euclidean);
        assert_eq!(nn[0], 12);
        assert_eq!(nn.len(), 5);
        let mut rest = nn[1..].to_vec();
        rest.sort();
        assert_eq!(rest, vec![7, 11, 13, 17]);
        assert_eq!(nearest_neighbors(&locs, &locs[0], 100, MetricMode::Euclidean).len(), 25);
    }

    #[test]
    fn haversine_quarter_meridian() {
        let d = haversine_km(&loc(0.0, 0.0), &loc(90.0, 0.0));
        assert_abs_diff_eq!(d, EARTH_RADIUS_KM * std::f64::consts::FRAC_PI_2, epsilon = 1e-9);
    }
}
