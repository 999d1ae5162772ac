//! Synthetic data, evaluation metrics and the multi-run comparison protocol.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{self, train_test_split, Location, MetricMode, SpatialDataset};
use crate::gp::PredictiveResult;
use crate::kernels::{factorize, Covariance, JitterPolicy, KernelKind, LengthScale, MaternParams};
use crate::pipeline::{fit_model, prepare, PipelineConfig};
use crate::{par, seeded_rng};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `sMSE = mean((y − y*)²) / var(y)` with the `n − 1` sample variance.
pub fn smse(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    if y_true.len() != y_pred.len() || y_true.len() < 2 {
        return Err(Error::BadDataset(format!(
            "smse needs two equal-length series of at least 2 values, got {} and {}",
            y_true.len(),
            y_pred.len()
        )));
    }
    let n = y_true.len() as f64;
    let mean = y_true.iter().sum::<f64>() / n;
    let var = y_true.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if !(var > 0.0) {
        return Err(Error::ZeroVariance);
    }
    let mse = y_true.iter().zip(y_pred).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    Ok(mse / var)
}

/// Mean negative Gaussian log predictive density.
pub fn nlpd(y_true: &[f64], pred: &[PredictiveResult]) -> Result<f64> {
    if y_true.len() != pred.len() || y_true.is_empty() {
        return Err(Error::BadDataset(format!(
            "nlpd needs equal non-empty lengths, got {} and {}",
            y_true.len(),
            pred.len()
        )));
    }
    let total: f64 = y_true
        .iter()
        .zip(pred)
        .map(|(y, p)| 0.5 * (LN_2PI + p.variance.ln() + (y - p.mean).powi(2) / p.variance))
        .sum();
    Ok(total / y_true.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    Smooth2d,
    Regional,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smooth2d" => Ok(SyntheticKind::Smooth2d),
            "regional" => Ok(SyntheticKind::Regional),
            _ => Err(Error::InvalidConfig(format!(
                "unknown synthetic kind `{s}` (expected smooth2d or regional)"
            ))),
        }
    }
}

/// A disk with its own stationary field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub center_lat: f64,
    pub center_lon: f64,
    pub radius: f64,
    pub length_scale: f64,
    pub amplitude: f64,
}

impl Region {
    pub fn contains(&self, l: &Location) -> bool {
        (l.lat() - self.center_lat).hypot(l.lon() - self.center_lon) <= self.radius
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n_train: usize,
    pub n_test: usize,
    pub noise_sd: f64,
    pub seed: u64,
    pub regions: Vec<Region>,
    pub background_length_scale: f64,
    pub background_amplitude: f64,
    /// `[lat_min, lat_max, lon_min, lon_max]`.
    pub extent: [f64; 4],
    pub nu: f64,
}

impl SyntheticSpec {
    /// 60°×60° patch with three disks (ℓ = 3°, 10°, 25°) over a smooth
    /// background, 315 training and 946 test points, noise 0.2.
    pub fn gia_analogue(seed: u64) -> Self {
        Self {
            kind: SyntheticKind::Regional,
            n_train: 315,
            n_test: 946,
            noise_sd: 0.2,
            seed,
            regions: vec![
                Region {
                    center_lat: 15.0,
                    center_lon: 45.0,
                    radius: 12.0,
                    length_scale: 3.0,
                    amplitude: 3.0,
                },
                Region {
                    center_lat: 45.0,
                    center_lon: 45.0,
                    radius: 12.0,
                    length_scale: 10.0,
                    amplitude: 1.0,
                },
                Region {
                    center_lat: 30.0,
                    center_lon: 15.0,
                    radius: 13.0,
                    length_scale: 25.0,
                    amplitude: 2.0,
                },
            ],
            background_length_scale: 40.0,
            background_amplitude: 0.5,
            extent: [0.0, 60.0, 0.0, 60.0],
            nu: 1.5,
        }
    }

    /// `f(x, y) = sin(10·x·y²) + 0.2·x` on the unit square.
    pub fn smooth2d(seed: u64) -> Self {
        Self {
            kind: SyntheticKind::Smooth2d,
            n_train: 315,
            n_test: 946,
            noise_sd: 0.2,
            seed,
            regions: Vec::new(),
            background_length_scale: 0.0,
            background_amplitude: 0.0,
            extent: [0.0, 1.0, 0.0, 1.0],
            nu: 1.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::InvalidConfig("synthetic n_train and n_test must be positive".into()));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(Error::InvalidConfig(format!("noise sd must be nonnegative, got {}", self.noise_sd)));
        }
        let [a, b, c, d] = self.extent;
        if !(a < b && c < d) {
            return Err(Error::InvalidConfig(format!("empty extent {:?}", self.extent)));
        }
        if self.kind == SyntheticKind::Regional {
            if self.regions.is_empty() {
                return Err(Error::InvalidConfig("regional spec needs at least one region".into()));
            }
            for r in &self.regions {
                if !(r.radius > 0.0 && r.length_scale > 0.0 && r.amplitude > 0.0) {
                    return Err(Error::InvalidConfig(format!("invalid region {r:?}")));
                }
            }
            if !(self.background_length_scale > 0.0 && self.background_amplitude > 0.0) {
                return Err(Error::InvalidConfig("background length scale and amplitude must be positive".into()));
            }
            for i in 0..self.regions.len() {
                for j in i + 1..self.regions.len() {
                    let (p, q) = (&self.regions[i], &self.regions[j]);
                    let d = (p.center_lat - q.center_lat).hypot(p.center_lon - q.center_lon);
                    if d < p.radius + q.radius {
                        return Err(Error::OverlappingRegions { first: i, second: j });
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn smooth2d_value(x: f64, y: f64) -> f64 {
    (10.0 * x * y * y).sin() + 0.2 * x
}

/// Generated train/test sets with per-point region tags (0 = background,
/// `k` = the k-th region).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub train: SpatialDataset,
    pub test: SpatialDataset,
    pub train_tags: Vec<usize>,
    pub test_tags: Vec<usize>,
}

fn sample_locations(spec: &SyntheticSpec, rng: &mut crate::Rng) -> Result<Vec<Location>> {
    let [lat0, lat1, lon0, lon1] = spec.extent;
    let n = spec.n_train + spec.n_test;
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let l = Location::new(rng.random_range(lat0..lat1), rng.random_range(lon0..lon1))?;
        if seen.insert((l.lat().to_bits(), l.lon().to_bits())) {
            out.push(l);
        }
    }
    Ok(out)
}

fn split(spec: &SyntheticSpec, locs: Vec<Location>, mut values: Vec<f64>, rng: &mut crate::Rng) -> Result<(SpatialDataset, SpatialDataset)> {
    for v in values.iter_mut().take(spec.n_train) {
        let e: f64 = rng.sample(StandardNormal);
        *v += spec.noise_sd * e;
    }
    let test_locs = locs[spec.n_train..].to_vec();
    let test_vals = values[spec.n_train..].to_vec();
    let train = SpatialDataset::new(locs[..spec.n_train].to_vec(), values[..spec.n_train].to_vec())?
        .with_noise_sd(spec.noise_sd);
    Ok((train, SpatialDataset::new(test_locs, test_vals)?))
}

/// Samples the smooth test function at uniform locations; noise on the
/// training part only.
pub fn generate_smooth2d(spec: &SyntheticSpec) -> Result<(SpatialDataset, SpatialDataset)> {
    spec.validate()?;
    let mut rng = seeded_rng(spec.seed);
    let locs = sample_locations(spec, &mut rng)?;
    let values = locs.iter().map(|l| smooth2d_value(l.lon(), l.lat())).collect();
    split(spec, locs, values, &mut rng)
}

/// Draw of a zero-mean stationary isotropic Matérn GP at `locs`.
pub fn stationary_draw(
    locs: &[Location],
    nu: f64,
    length_scale: f64,
    amplitude: f64,
    rng: &mut crate::Rng,
) -> Result<Vec<f64>> {
    if locs.is_empty() {
        return Ok(Vec::new());
    }
    let p = MaternParams::new(nu, amplitude, 0.0, LengthScale::Iso(length_scale))?;
    let cov = Covariance::new(KernelKind::StatIso, p, MetricMode::Euclidean);
    let k = cov.correlation_matrix(locs, &vec![None; locs.len()])? * cov.signal_variance();
    let f = factorize(k, 0.0, &JitterPolicy::default())?;
    let z = DVector::from_iterator(locs.len(), (0..locs.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
    Ok((f.chol.l() * z).iter().copied().collect())
}

/// Piecewise field: an independent stationary draw inside each disk and one
/// for the background.
pub fn generate_regional(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = seeded_rng(spec.seed);
    let locs = sample_locations(spec, &mut rng)?;
    let tags: Vec<usize> = locs
        .iter()
        .map(|l| spec.regions.iter().position(|r| r.contains(l)).map_or(0, |k| k + 1))
        .collect();
    let mut values = vec![0.0; locs.len()];
    for tag in 0..=spec.regions.len() {
        let idx: Vec<usize> = (0..locs.len()).filter(|&i| tags[i] == tag).collect();
        let sub: Vec<Location> = idx.iter().map(|&i| locs[i]).collect();
        let (ell, amp) = match tag {
            0 => (spec.background_length_scale, spec.background_amplitude),
            k => (spec.regions[k - 1].length_scale, spec.regions[k - 1].amplitude),
        };
        let draw = stationary_draw(&sub, spec.nu, ell, amp, &mut rng)?;
        for (&i, v) in idx.iter().zip(draw) {
            values[i] = v;
        }
    }
    let (train, test) = split(spec, locs, values, &mut rng)?;
    Ok(SyntheticData {
        train,
        test,
        train_tags: tags[..spec.n_train].to_vec(),
        test_tags: tags[spec.n_train..].to_vec(),
    })
}

/// Generates either kind; smooth data carries all-zero tags.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    match spec.kind {
        SyntheticKind::Regional => generate_regional(spec),
        SyntheticKind::Smooth2d => {
            let (train, test) = generate_smooth2d(spec)?;
            Ok(SyntheticData {
                train_tags: vec![0; train.len()],
                test_tags: vec![0; test.len()],
                train,
                test,
            })
        }
    }
}

/// Empirical semivariogram `γ(h) = mean ½(zᵢ − zⱼ)²` in distance bins of
/// width `bin_width`; bins without pairs are `NaN`.
pub fn empirical_variogram(locs: &[Location], values: &[f64], bin_width: f64, n_bins: usize) -> Vec<f64> {
    let mut sum = vec![0.0; n_bins];
    let mut count = vec![0usize; n_bins];
    for i in 0..locs.len() {
        for j in i + 1..locs.len() {
            let h = geo::displacement(&locs[i], &locs[j], MetricMode::Euclidean).norm();
            let b = (h / bin_width) as usize;
            if b < n_bins {
                sum[b] += 0.5 * (values[i] - values[j]).powi(2);
                count[b] += 1;
            }
        }
    }
    sum.iter()
        .zip(&count)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::NAN })
        .collect()
}

/// Where the runs of a comparison get their data.
#[derive(Debug, Clone)]
pub enum DataSource {
    /// A fresh synthetic draw per run, seeded `root + run`.
    Synthetic(SyntheticSpec),
    /// A fixed dataset, re-split per run.
    Dataset { data: SpatialDataset, n_train: usize },
    /// The same train and test sets every run.
    Fixed { train: SpatialDataset, test: SpatialDataset },
}

impl DataSource {
    fn draw(&self, seed: u64) -> Result<SyntheticData> {
        match self {
            DataSource::Synthetic(spec) => generate(&SyntheticSpec { seed, ..spec.clone() }),
            DataSource::Dataset { data, n_train } => {
                let (train, test) = train_test_split(data, *n_train, seed)?;
                Ok(SyntheticData {
                    train_tags: vec![0; train.len()],
                    test_tags: vec![0; test.len()],
                    train,
                    test,
                })
            }
            DataSource::Fixed { train, test } => Ok(SyntheticData {
                train_tags: vec![0; train.len()],
                test_tags: vec![0; test.len()],
                train: train.clone(),
                test: test.clone(),
            }),
        }
    }

    /// Number of non-background regions.
    pub fn n_regions(&self) -> usize {
        match self {
            DataSource::Synthetic(spec) if spec.kind == SyntheticKind::Regional => spec.regions.len(),
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunRow {
    pub run: usize,
    pub method: KernelKind,
    pub smse: f64,
    pub nlpd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionRow {
    pub run: usize,
    pub method: KernelKind,
    pub region: usize,
    pub smse: f64,
    pub nlpd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunFailure {
    pub run: usize,
    pub method: Option<KernelKind>,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub smse_mean: f64,
    pub smse_sd: f64,
    pub nlpd_mean: f64,
    pub nlpd_sd: f64,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

fn summarize(rows: impl Iterator<Item = (f64, f64)>) -> Option<Summary> {
    let (s, l): (Vec<f64>, Vec<f64>) = rows.unzip();
    if s.is_empty() {
        return None;
    }
    let (smse_mean, smse_sd) = mean_sd(&s);
    let (nlpd_mean, nlpd_sd) = mean_sd(&l);
    Some(Summary {
        n: s.len(),
        smse_mean,
        smse_sd,
        nlpd_mean,
        nlpd_sd,
    })
}

/// Per-run metrics for every method, with optional per-region breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub methods: Vec<KernelKind>,
    pub n_runs: usize,
    pub n_regions: usize,
    pub rows: Vec<RunRow>,
    pub region_rows: Vec<RegionRow>,
    /// Runs with any failure contribute no rows.
    pub failures: Vec<RunFailure>,
}

impl MetricsReport {
    pub fn summary(&self, method: KernelKind) -> Option<Summary> {
        summarize(self.rows.iter().filter(|r| r.method == method).map(|r| (r.smse, r.nlpd)))
    }

    pub fn region_summary(&self, method: KernelKind, region: usize) -> Option<Summary> {
        summarize(
            self.region_rows
                .iter()
                .filter(|r| r.method == method && r.region == region && r.smse.is_finite())
                .map(|r| (r.smse, r.nlpd)),
        )
    }

    pub fn row(&self, run: usize, method: KernelKind) -> Option<&RunRow> {
        self.rows.iter().find(|r| r.run == run && r.method == method)
    }

    pub fn region_row(&self, run: usize, method: KernelKind, region: usize) -> Option<&RegionRow> {
        self.region_rows
            .iter()
            .find(|r| r.run == run && r.method == method && r.region == region)
    }

    /// Runs that produced rows.
    pub fn completed_runs(&self) -> Vec<usize> {
        let s: BTreeSet<usize> = self.rows.iter().map(|r| r.run).collect();
        s.into_iter().collect()
    }

    /// `run,method,smse,nlpd`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| vec![r.run.to_string(), r.method.cli_name().to_string(), r.smse.to_string(), r.nlpd.to_string()])
            .collect();
        geo::write_table(path.as_ref(), &REPORT_HEADER, &rows)
    }

    /// `run,method,region,smse,nlpd`.
    pub fn write_region_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let rows: Vec<Vec<String>> = self
            .region_rows
            .iter()
            .map(|r| {
                vec![
                    r.run.to_string(),
                    r.method.cli_name().to_string(),
                    r.region.to_string(),
                    r.smse.to_string(),
                    r.nlpd.to_string(),
                ]
            })
            .collect();
        geo::write_table(path.as_ref(), &REGION_REPORT_HEADER, &rows)
    }

    /// Plain-text table with one row per method and `sMSE nLPD` column pairs
    /// for the full field and each region.
    pub fn table(&self, dataset: &str) -> String {
        let mut cols = vec![format!("{dataset} (All)")];
        cols.extend((1..=self.n_regions).map(|k| format!("{dataset} (Reg.{k})")));
        let mut out = String::new();
        let _ = write!(out, "{:<12}", "Methods");
        for c in &cols {
            let _ = write!(out, " | {c:^21}");
        }
        out.push('\n');
        let _ = write!(out, "{:<12}", "");
        for _ in &cols {
            let _ = write!(out, " | {:>10} {:>10}", "sMSE", "nLPD");
        }
        out.push('\n');
        for &m in &self.methods {
            let _ = write!(out, "{:<12}", m.label());
            let mut cells = vec![self.summary(m)];
            cells.extend((1..=self.n_regions).map(|k| self.region_summary(m, k)));
            for s in cells {
                match s {
                    Some(s) => {
                        let _ = write!(out, " | {:>10.4} {:>10.4}", s.smse_mean, s.nlpd_mean);
                    }
                    None => {
                        let _ = write!(out, " | {:>10} {:>10}", "-", "-");
                    }
                }
            }
            out.push('\n');
        }
        let max_sd = self
            .methods
            .iter()
            .filter_map(|&m| self.summary(m))
            .map(|s| s.smse_sd)
            .fold(0.0, f64::max);
        let _ = writeln!(
            out,
            "runs: {} completed of {}, failures: {}, max sMSE sd: {:.4}",
            self.completed_runs().len(),
            self.n_runs,
            self.failures.len(),
            max_sd
        );
        out
    }
}

pub const REPORT_HEADER: [&str; 4] = ["run", "method", "smse", "nlpd"];
pub const REGION_REPORT_HEADER: [&str; 5] = ["run", "method", "region", "smse", "nlpd"];
pub const TAGS_HEADER: [&str; 3] = ["lat_deg", "lon_deg", "region"];
pub const METRICS_HEADER: [&str; 2] = ["smse", "nlpd"];

/// Reads `run,method,smse,nlpd` rows back.
pub fn load_report_csv(path: impl AsRef<Path>) -> Result<Vec<RunRow>> {
    let path = path.as_ref();
    let mut reader = geo::open_csv(path)?;
    geo::check_header(path, &mut reader, &REPORT_HEADER)?;
    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = row as u64 + 2;
        out.push(RunRow {
            run: geo::parse_field(path, line, "run", record.get(0))?,
            method: geo::parse_field(path, line, "method", record.get(1))?,
            smse: geo::parse_field(path, line, "smse", record.get(2))?,
            nlpd: geo::parse_field(path, line, "nlpd", record.get(3))?,
        });
    }
    Ok(out)
}

/// Reads `run,method,region,smse,nlpd` rows back.
pub fn load_region_report_csv(path: impl AsRef<Path>) -> Result<Vec<RegionRow>> {
    let path = path.as_ref();
    let mut reader = geo::open_csv(path)?;
    geo::check_header(path, &mut reader, &REGION_REPORT_HEADER)?;
    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = row as u64 + 2;
        out.push(RegionRow {
            run: geo::parse_field(path, line, "run", record.get(0))?,
            method: geo::parse_field(path, line, "method", record.get(1))?,
            region: geo::parse_field(path, line, "region", record.get(2))?,
            smse: geo::parse_field(path, line, "smse", record.get(3))?,
            nlpd: geo::parse_field(path, line, "nlpd", record.get(4))?,
        });
    }
    Ok(out)
}

/// `lat_deg,lon_deg,region` with 0 for the background.
pub fn write_tags_csv(path: impl AsRef<Path>, locations: &[Location], tags: &[usize]) -> Result<()> {
    let rows: Vec<Vec<String>> = locations
        .iter()
        .zip(tags)
        .map(|(l, t)| vec![l.lat().to_string(), l.lon().to_string(), t.to_string()])
        .collect();
    geo::write_table(path.as_ref(), &TAGS_HEADER, &rows)
}

pub fn load_tags_csv(path: impl AsRef<Path>) -> Result<Vec<(Location, usize)>> {
    let path = path.as_ref();
    let mut reader = geo::open_csv(path)?;
    geo::check_header(path, &mut reader, &TAGS_HEADER)?;
    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = row as u64 + 2;
        let lat = geo::parse_field(path, line, "lat_deg", record.get(0))?;
        let lon = geo::parse_field(path, line, "lon_deg", record.get(1))?;
        let tag = geo::parse_field(path, line, "region", record.get(2))?;
        out.push((geo::location_at(path, line, lat, lon)?, tag));
    }
    Ok(out)
}

pub fn write_metrics_csv(path: impl AsRef<Path>, smse: f64, nlpd: f64) -> Result<()> {
    geo::write_table(path.as_ref(), &METRICS_HEADER, &[vec![smse.to_string(), nlpd.to_string()]])
}

/// Reads `(smse, nlpd)` back.
pub fn load_metrics_csv(path: impl AsRef<Path>) -> Result<(f64, f64)> {
    let path = path.as_ref();
    let mut reader = geo::open_csv(path)?;
    geo::check_header(path, &mut reader, &METRICS_HEADER)?;
    let record = reader
        .records()
        .next()
        .ok_or_else(|| Error::BadDataset(format!("{}: no metrics row", path.display())))??;
    Ok((
        geo::parse_field(path, 2, "smse", record.get(0))?,
        geo::parse_field(path, 2, "nlpd", record.get(1))?,
    ))
}

struct RunOutcome {
    rows: Vec<RunRow>,
    region_rows: Vec<RegionRow>,
    failures: Vec<RunFailure>,
}

fn run_once(source: &DataSource, methods: &[KernelKind], run: usize, seed: u64, cfg: &PipelineConfig, n_regions: usize) -> RunOutcome {
    let fail = |method, e: Error| RunOutcome {
        rows: Vec::new(),
        region_rows: Vec::new(),
        failures: vec![RunFailure {
            run,
            method,
            message: e.to_string(),
        }],
    };
    let data = match source.draw(seed) {
        Ok(d) => d,
        Err(e) => return fail(None, e),
    };
    let shared = match prepare(&data.train, cfg, methods) {
        Ok(s) => s,
        Err(e) => return fail(None, e),
    };
    let mut rows = Vec::new();
    let mut region_rows = Vec::new();
    let y = data.test.values();
    for &method in methods {
        let result = fit_model(&data.train, method, cfg, &shared, seed).and_then(|m| m.predict(data.test.locations()));
        let pred = match result {
            Ok(p) => p,
            Err(e) => return fail(Some(method), e),
        };
        let means: Vec<f64> = pred.iter().map(|p| p.mean).collect();
        let scored = smse(y, &means).and_then(|s| Ok((s, nlpd(y, &pred)?)));
        let (s, l) = match scored {
            Ok(v) => v,
            Err(e) => return fail(Some(method), e),
        };
        rows.push(RunRow {
            run,
            method,
            smse: s,
            nlpd: l,
        });
        for region in 1..=n_regions {
            let idx: Vec<usize> = (0..y.len()).filter(|&i| data.test_tags[i] == region).collect();
            let yt: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            let ym: Vec<f64> = idx.iter().map(|&i| means[i]).collect();
            let pr: Vec<PredictiveResult> = idx.iter().map(|&i| pred[i]).collect();
            let (rs, rl) = match (smse(&yt, &ym), nlpd(&yt, &pr)) {
                (Ok(a), Ok(b)) => (a, b),
                _ => (f64::NAN, f64::NAN),
            };
            region_rows.push(RegionRow {
                run,
                method,
                region,
                smse: rs,
                nlpd: rl,
            });
        }
    }
    RunOutcome {
        rows,
        region_rows,
        failures: Vec::new(),
    }
}

/// Runs every method on `n_runs` independent draws, seeding run `r` with
/// `seed + r`.
pub fn run_comparison(
    source: &DataSource,
    methods: &[KernelKind],
    n_runs: usize,
    seed: u64,
    cfg: &PipelineConfig,
) -> Result<MetricsReport> {
    if methods.is_empty() {
        return Err(Error::InvalidConfig("comparison needs at least one method".into()));
    }
    let n_regions = source.n_regions();
    let outcomes = par::map_range(n_runs, |r| {
        let o = run_once(source, methods, r, seed.wrapping_add(r as u64), cfg, n_regions);
        for f in &o.failures {
            log::warn!("run {} failed ({:?}): {}", f.run, f.method, f.message);
        }
        o
    });
    let mut report = MetricsReport {
        methods: methods.to_vec(),
        n_runs,
        n_regions,
        rows: Vec::new(),
        region_rows: Vec::new(),
        failures: Vec::new(),
    };
    for o in outcomes {
        report.rows.extend(o.rows);
        report.region_rows.extend(o.region_rows);
        report.failures.extend(o.failures);
    }
    Ok(report)
}
