//! The characteristic-length-scale (CLS) field: per-point estimates, latent
//! smoothing, and intrinsic regional means.
//!
//! Each CLS matrix is written as `Σ = Γᵀ D Γ` with
//! `Γ = [[u/l, −v/l], [v/l, u/l]]`, `l = √(u² + v²)` and
//! `D = diag(ln λ₁, ln λ₂)`. The eigenvalues `ln λ` are what gets stored, as
//! `log_lam1`/`log_lam2`, since `λ` itself overflows for length scales beyond
//! a few tens of coordinate units.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{self, displacement, nearest_neighbors, wrap_degrees, Location, MetricMode, SpatialDataset};
use crate::gp::{self, FitOptions};
use crate::inference::{fit_stationary, StationaryFit, StationaryFitOptions};
use crate::kernels::{factorize, matern_correlation, Covariance, JitterPolicy, KernelKind, LengthScale, MaternParams, SiteCls};
use crate::optimize::minimize_multistart;
use crate::par;
use crate::spd::{geodesic_midpoint, karcher_mean, per_element_deviation, SpdMatrix, KARCHER_MAX_ITER, KARCHER_TOL};

/// Smallest stored eigenvalue `ln λ`, i.e. `λ > 1 + 1e-6`.
pub const MIN_LOG_LAM: f64 = 1e-6;

/// Default largest stored eigenvalue `ln λ` (a length scale of 100 units).
pub const DEFAULT_MAX_LOG_LAM: f64 = 1e4;

/// Smoothness of the latent GPs.
pub const LATENT_NU: f64 = 1.5;

/// Latent eigen-parameters of one CLS matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenParams {
    pub u: f64,
    pub v: f64,
    /// `ln λ₁`, the eigenvalue of Σ along `(u, −v)/l`.
    pub log_lam1: f64,
    /// `ln λ₂`, the eigenvalue of Σ along `(v, u)/l`.
    pub log_lam2: f64,
}

impl EigenParams {
    pub fn new(u: f64, v: f64, log_lam1: f64, log_lam2: f64) -> Result<Self> {
        if !(u.is_finite() && v.is_finite()) {
            return Err(Error::NumericalFailure(format!("non-finite rotation ({u}, {v})")));
        }
        if u.hypot(v) < 1e-12 {
            return Err(Error::DegenerateRotation);
        }
        for l in [log_lam1, log_lam2] {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::NumericalFailure(format!("ln(lambda) must be positive, got {l}")));
            }
        }
        Ok(Self { u, v, log_lam1, log_lam2 })
    }

    pub fn lam1(&self) -> f64 {
        self.log_lam1.exp()
    }

    pub fn lam2(&self) -> f64 {
        self.log_lam2.exp()
    }

    /// Canonical parameters of `sigma`: unit `(u, v)` with `u ≥ 0` and the
    /// major eigenvalue first.
    pub fn from_spd(sigma: &SpdMatrix) -> Self {
        let e = sigma.eigen();
        let theta = sigma.major_axis_angle();
        Self {
            u: theta.cos(),
            v: -theta.sin(),
            log_lam1: e.major,
            log_lam2: e.minor,
        }
    }

    /// Clamps both eigenvalues into `[MIN_LOG_LAM, max_log_lam]`.
    pub fn clamped(mut self, max_log_lam: f64) -> Self {
        self.log_lam1 = self.log_lam1.clamp(MIN_LOG_LAM, max_log_lam);
        self.log_lam2 = self.log_lam2.clamp(MIN_LOG_LAM, max_log_lam);
        self
    }
}

/// `Σ = Γᵀ D Γ`.
pub fn sigma_from_eigenparams(e: &EigenParams) -> Result<SpdMatrix> {
    let l = e.u.hypot(e.v);
    if !(l >= 1e-12) {
        return Err(Error::DegenerateRotation);
    }
    let (c, s) = (e.u / l, e.v / l);
    let gamma = Matrix2::new(c, -s, s, c);
    let d = Matrix2::new(e.log_lam1, 0.0, 0.0, e.log_lam2);
    SpdMatrix::new(gamma.transpose() * d * gamma)
}

/// Settings for [`init_cls`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitOptions {
    pub nu: f64,
    /// Prior sd of the local matrix-log coordinates around the global fit.
    pub shrinkage_sd: f64,
    pub max_log_lam: f64,
    pub max_iter: u64,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            nu: 1.5,
            shrinkage_sd: 0.5,
            max_log_lam: DEFAULT_MAX_LOG_LAM,
            max_iter: 200,
        }
    }
}

/// Per-point CLS estimates from local anisotropic fits over `k_local`
/// nearest neighbors, shrunk towards a global isotropic fit.
pub fn init_cls(train: &SpatialDataset, k_local: usize, mode: MetricMode) -> Result<Vec<EigenParams>> {
    let global = fit_stationary(train, KernelKind::StatIso, mode, &StationaryFitOptions::default())?;
    init_cls_with(train, k_local, mode, &global, &InitOptions::default())
}

/// As [`init_cls`], around an existing global stationary fit.
pub fn init_cls_with(
    train: &SpatialDataset,
    k_local: usize,
    mode: MetricMode,
    global: &StationaryFit,
    opts: &InitOptions,
) -> Result<Vec<EigenParams>> {
    if k_local < 4 || k_local > train.len() {
        return Err(Error::InsufficientNeighbors {
            requested: k_local,
            available: train.len(),
        });
    }
    let center = global.cls.log_coords();
    let results = par::map_range(train.len(), |i| -> Result<EigenParams> {
        let idx = nearest_neighbors(train.locations(), &train.locations()[i], k_local, mode);
        let local = train.subset(&idx)?;
        let sigma = local_fit(&local, mode, global, center, opts)?;
        Ok(EigenParams::from_spd(&sigma).clamped(opts.max_log_lam))
    });
    results.into_iter().collect()
}

fn local_fit(
    local: &SpatialDataset,
    mode: MetricMode,
    global: &StationaryFit,
    center: [f64; 3],
    opts: &InitOptions,
) -> Result<SpdMatrix> {
    let var = 1.0 / (opts.shrinkage_sd * opts.shrinkage_sd);
    let objective = |z: &[f64]| -> f64 {
        let Ok(sigma) = SpdMatrix::from_log_coords(z[0], z[1], z[2]) else {
            return f64::INFINITY;
        };
        let Ok(p) = MaternParams::new(opts.nu, global.sigma_f, global.sigma_n, LengthScale::Aniso(sigma)) else {
            return f64::INFINITY;
        };
        let cov = Covariance::new(KernelKind::StatAniso, p, mode);
        let penalty: f64 = z.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() * 0.5 * var;
        match gp::fit(local, &cov, &ClsAssignment::stationary(), &FitOptions::centered()) {
            Ok(g) => -g.log_marginal_likelihood() + penalty,
            Err(_) => f64::INFINITY,
        }
    };
    let [a, b, c] = center;
    let starts = [vec![a, b, c], vec![a + 1.0, b - 1.0, c], vec![a - 1.0, b + 1.0, c]];
    let best = minimize_multistart(objective, &starts, &[0.5, 0.5, 0.5], opts.max_iter, 1e-6)?;
    SpdMatrix::from_log_coords(best.x[0], best.x[1], best.x[2])
}

/// Which coordinates the latent GPs take as input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentInput {
    /// `u` and `ln ln λ₁` over latitude; `v` and `ln ln λ₂` over longitude.
    #[default]
    #[serde(rename = "1d")]
    OneD,
    /// All four over the 2-D location.
    #[serde(rename = "2d")]
    TwoD,
}

impl std::str::FromStr for LatentInput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1d" => Ok(LatentInput::OneD),
            "2d" => Ok(LatentInput::TwoD),
            _ => Err(Error::InvalidConfig(format!("unknown latent input `{s}` (expected 1d or 2d)"))),
        }
    }
}

/// Hyperparameters of one latent GP. The posterior mean depends on the
/// noise only through `noise_ratio = σ_noise² / σ_signal²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentGpHyper {
    pub length_scale: f64,
    pub noise_ratio: f64,
}

/// The four latent GPs, in the order `u`, `ln λ₁`, `v`, `ln λ₂`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentHyper(pub [LatentGpHyper; 4]);

impl LatentHyper {
    pub const NAMES: [&'static str; 4] = ["u", "lam1", "v", "lam2"];

    pub fn uniform(length_scale: f64, noise_ratio: f64) -> Self {
        Self([LatentGpHyper { length_scale, noise_ratio }; 4])
    }

    /// Length scale at a fixed fraction of each input's coordinate span.
    pub fn default_for(locations: &[Location], input: LatentInput) -> Self {
        let span = |f: fn(&Location) -> f64| {
            let (lo, hi) = locations
                .iter()
                .map(f)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            if hi > lo {
                hi - lo
            } else {
                1.0
            }
        };
        let (lat, lon) = (span(Location::lat), span(Location::lon));
        let both = lat.max(lon);
        let (ls_lat, ls_lon) = match input {
            LatentInput::OneD => (lat, lon),
            LatentInput::TwoD => (both, both),
        };
        let h = |s: f64| LatentGpHyper {
            length_scale: (0.2 * s).max(1e-3),
            noise_ratio: 0.5,
        };
        Self([h(ls_lat), h(ls_lat), h(ls_lon), h(ls_lon)])
    }

    /// Flattened as `[ℓ_u, r_u, ℓ_λ₁, r_λ₁, ℓ_v, r_v, ℓ_λ₂, r_λ₂]`.
    pub fn to_vec(&self) -> Vec<f64> {
        self.0.iter().flat_map(|h| [h.length_scale, h.noise_ratio]).collect()
    }

    pub fn from_slice(v: &[f64]) -> Self {
        let h = |i: usize| LatentGpHyper {
            length_scale: v[2 * i],
            noise_ratio: v[2 * i + 1],
        };
        Self([h(0), h(1), h(2), h(3)])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Axis {
    Lat,
    Lon,
    Plane,
}

#[derive(Debug, Clone)]
struct LatentComponent {
    axis: Axis,
    length_scale: f64,
    mean: f64,
    alpha: DVector<f64>,
}

fn axis_distance(axis: Axis, a: &Location, b: &Location, mode: MetricMode) -> f64 {
    match axis {
        Axis::Lat => (a.lat() - b.lat()).abs(),
        Axis::Lon => wrap_degrees(a.lon() - b.lon()).abs(),
        Axis::Plane => displacement(a, b, mode).norm(),
    }
}

impl LatentComponent {
    fn fit(
        axis: Axis,
        hp: &LatentGpHyper,
        locations: &[Location],
        values: &[f64],
        mode: MetricMode,
        jitter: &JitterPolicy,
    ) -> Result<(Self, Vec<f64>)> {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let k = DMatrix::from_fn(n, n, |i, j| {
            matern_correlation(LATENT_NU, axis_distance(axis, &locations[i], &locations[j], mode) / hp.length_scale)
        });
        let f = factorize(k.clone(), hp.noise_ratio, jitter)?;
        let y = DVector::from_iterator(n, values.iter().map(|v| v - mean));
        let alpha = f.chol.solve(&y);
        let fitted = (&k * &alpha).iter().map(|v| v + mean).collect();
        Ok((
            Self {
                axis,
                length_scale: hp.length_scale,
                mean,
                alpha,
            },
            fitted,
        ))
    }

    fn at(&self, x: &Location, locations: &[Location], mode: MetricMode) -> f64 {
        let s: f64 = locations
            .iter()
            .zip(self.alpha.iter())
            .map(|(l, a)| a * matern_correlation(LATENT_NU, axis_distance(self.axis, x, l, mode) / self.length_scale))
            .sum();
        self.mean + s
    }
}

/// Posterior-mean latent fields for the four eigen-parameters.
#[derive(Debug, Clone)]
pub struct LatentField {
    hyper: LatentHyper,
    input: LatentInput,
    mode: MetricMode,
    max_log_lam: f64,
    locations: Vec<Location>,
    components: Vec<LatentComponent>,
    smoothed: Vec<EigenParams>,
}

impl LatentField {
    /// Fits the latent GPs to `raw` (after orientation alignment).
    pub fn fit(
        raw: &[EigenParams],
        locations: &[Location],
        hyper: &LatentHyper,
        input: LatentInput,
        mode: MetricMode,
    ) -> Result<Self> {
        if raw.len() != locations.len() || raw.is_empty() {
            return Err(Error::BadDataset(format!(
                "{} eigen-parameter sets for {} locations",
                raw.len(),
                locations.len()
            )));
        }
        let mut aligned = raw.to_vec();
        align_orientations(&mut aligned);
        let series: [Vec<f64>; 4] = [
            aligned.iter().map(|e| e.u).collect(),
            aligned.iter().map(|e| e.log_lam1.ln()).collect(),
            aligned.iter().map(|e| e.v).collect(),
            aligned.iter().map(|e| e.log_lam2.ln()).collect(),
        ];
        let axes = match input {
            LatentInput::OneD => [Axis::Lat, Axis::Lat, Axis::Lon, Axis::Lon],
            LatentInput::TwoD => [Axis::Plane; 4],
        };
        let jitter = JitterPolicy::default();
        let mut components = Vec::with_capacity(4);
        let mut fitted = Vec::with_capacity(4);
        for c in 0..4 {
            let (comp, f) = LatentComponent::fit(axes[c], &hyper.0[c], locations, &series[c], mode, &jitter)?;
            components.push(comp);
            fitted.push(f);
        }
        let max_log_lam = raw
            .iter()
            .map(|e| e.log_lam1.max(e.log_lam2))
            .fold(DEFAULT_MAX_LOG_LAM, f64::max);
        let smoothed = (0..raw.len())
            .map(|i| assemble([fitted[0][i], fitted[1][i], fitted[2][i], fitted[3][i]], max_log_lam))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            hyper: *hyper,
            input,
            mode,
            max_log_lam,
            locations: locations.to_vec(),
            components,
            smoothed,
        })
    }

    pub fn hyper(&self) -> &LatentHyper {
        &self.hyper
    }

    pub fn input(&self) -> LatentInput {
        self.input
    }

    /// Smoothed parameters at the training locations.
    pub fn smoothed(&self) -> &[EigenParams] {
        &self.smoothed
    }

    pub fn smoothed_cls(&self) -> Result<Vec<SpdMatrix>> {
        self.smoothed.iter().map(sigma_from_eigenparams).collect()
    }

    /// Posterior-mean parameters at an arbitrary location.
    pub fn at(&self, x: &Location) -> Result<EigenParams> {
        let v: Vec<f64> = self
            .components
            .iter()
            .map(|c| c.at(x, &self.locations, self.mode))
            .collect();
        assemble([v[0], v[1], v[2], v[3]], self.max_log_lam)
    }
}

fn assemble(v: [f64; 4], max_log_lam: f64) -> Result<EigenParams> {
    let e = EigenParams {
        u: v[0],
        v: v[2],
        log_lam1: v[1].exp(),
        log_lam2: v[3].exp(),
    }
    .clamped(max_log_lam);
    EigenParams::new(e.u, e.v, e.log_lam1, e.log_lam2)
}

/// Flips `(u, v)` signs (which leaves each Σ unchanged) so all rotations
/// point into the half-plane of the mean axis direction.
pub fn align_orientations(params: &mut [EigenParams]) {
    // Axis directions are defined modulo π, so average doubled angles.
    let (mut c2, mut s2) = (0.0, 0.0);
    for e in params.iter() {
        let phi = (-e.v).atan2(e.u);
        c2 += (2.0 * phi).cos();
        s2 += (2.0 * phi).sin();
    }
    if c2 == 0.0 && s2 == 0.0 {
        return;
    }
    let mean = 0.5 * s2.atan2(c2);
    let (ru, rv) = (mean.cos(), -mean.sin());
    for e in params.iter_mut() {
        if e.u * ru + e.v * rv < 0.0 {
            e.u = -e.u;
            e.v = -e.v;
        }
    }
}

/// Replaces each raw parameter set by its latent-GP posterior mean at its own
/// location.
pub fn smooth_cls(
    raw: &[EigenParams],
    locations: &[Location],
    latent_hp: &LatentHyper,
    input: LatentInput,
    mode: MetricMode,
) -> Result<Vec<EigenParams>> {
    Ok(LatentField::fit(raw, locations, latent_hp, input, mode)?.smoothed)
}

/// Which neighbors Algorithm 2's outlier filter drops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterDirection {
    /// Drop neighbors whose deviation exceeds the threshold.
    #[default]
    RemoveAbove,
    /// Drop neighbors whose deviation is below the threshold.
    RemoveBelow,
}

impl std::str::FromStr for FilterDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "remove-above" => Ok(FilterDirection::RemoveAbove),
            "remove-below" => Ok(FilterDirection::RemoveBelow),
            _ => Err(Error::InvalidConfig(format!(
                "unknown filter direction `{s}` (expected remove-above or remove-below)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicConfig {
    pub k_neighbors: usize,
    /// Compared with squared tangent norms `‖log_map(Σ̄, Σₖ)‖²`; may be `∞`.
    pub deviation_threshold: f64,
    pub filter_direction: FilterDirection,
    pub min_survivors: usize,
}

impl Default for IntrinsicConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 8,
            deviation_threshold: 1.0,
            filter_direction: FilterDirection::RemoveAbove,
            min_survivors: 3,
        }
    }
}

impl IntrinsicConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.k_neighbors < 2 || self.k_neighbors > n {
            return Err(Error::InsufficientNeighbors {
                requested: self.k_neighbors,
                available: n,
            });
        }
        if !(self.deviation_threshold > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "deviation threshold must be positive, got {}",
                self.deviation_threshold
            )));
        }
        if self.min_survivors < 1 || self.min_survivors > self.k_neighbors {
            return Err(Error::InvalidConfig(format!(
                "min_survivors must be in 1..={}, got {}",
                self.k_neighbors, self.min_survivors
            )));
        }
        Ok(())
    }
}

/// Filtered Karcher mean of a neighborhood. `members[0]` is the anchor and
/// is always kept.
fn filtered_mean(members: &[SpdMatrix], cfg: &IntrinsicConfig) -> Result<SpdMatrix> {
    let mean = sorted_karcher(members)?;
    let dev = per_element_deviation(members, &mean)?;
    let passes = |d: f64| match cfg.filter_direction {
        FilterDirection::RemoveAbove => d <= cfg.deviation_threshold,
        FilterDirection::RemoveBelow => d >= cfg.deviation_threshold,
    };
    let mut keep: Vec<bool> = dev.iter().enumerate().map(|(k, &d)| k == 0 || passes(d)).collect();
    let mut kept = keep.iter().filter(|&&b| b).count();
    if kept < cfg.min_survivors {
        let mut dropped: Vec<usize> = (0..members.len()).filter(|&k| !keep[k]).collect();
        dropped.sort_by(|&a, &b| {
            let o = dev[a].total_cmp(&dev[b]);
            let o = match cfg.filter_direction {
                FilterDirection::RemoveAbove => o,
                FilterDirection::RemoveBelow => o.reverse(),
            };
            o.then(a.cmp(&b))
        });
        for k in dropped.into_iter().take(cfg.min_survivors - kept) {
            keep[k] = true;
            kept += 1;
        }
    }
    if kept == members.len() {
        return Ok(mean);
    }
    let survivors: Vec<SpdMatrix> = members.iter().zip(&keep).filter(|(_, &k)| k).map(|(m, _)| *m).collect();
    sorted_karcher(&survivors)
}

/// Stalled Karcher iterations whose best gradient norm is below this are
/// accepted; the remaining error is far below any CLS resolution.
pub const KARCHER_ACCEPT: f64 = 1e-8;

/// Karcher mean of the set in canonical order, so the result does not depend
/// on how the members were listed.
fn sorted_karcher(set: &[SpdMatrix]) -> Result<SpdMatrix> {
    let mut sorted = set.to_vec();
    sorted.sort_by(|a, b| a.canonical_cmp(b));
    match karcher_mean(&sorted, KARCHER_TOL, KARCHER_MAX_ITER) {
        Ok(k) => Ok(k.mean),
        Err(Error::NonConvergence {
            best, gradient_norm, ..
        }) if gradient_norm < KARCHER_ACCEPT => {
            log::debug!("regional Karcher mean stalled at gradient norm {gradient_norm:e}; using best iterate");
            Ok(best)
        }
        Err(e) => Err(e),
    }
}

/// Σ̄ᵢ: the filtered Karcher mean over the `K` nearest neighbors of point `i`,
/// itself included.
pub fn regional_mean_cls(
    i: usize,
    cls: &[SpdMatrix],
    locations: &[Location],
    cfg: &IntrinsicConfig,
    mode: MetricMode,
) -> Result<SpdMatrix> {
    cfg.validate(locations.len())?;
    let mut idx = nearest_neighbors(locations, &locations[i], cfg.k_neighbors, mode);
    if let Some(pos) = idx.iter().position(|&j| j == i) {
        idx.swap(0, pos);
    } else {
        idx.pop();
        idx.insert(0, i);
    }
    let members: Vec<SpdMatrix> = idx.iter().map(|&j| cls[j]).collect();
    filtered_mean(&members, cfg)
}

/// Σ̄ for every training point.
pub fn regional_means(
    cls: &[SpdMatrix],
    locations: &[Location],
    cfg: &IntrinsicConfig,
    mode: MetricMode,
) -> Result<Vec<SpdMatrix>> {
    cfg.validate(locations.len())?;
    par::map_range(cls.len(), |i| regional_mean_cls(i, cls, locations, cfg, mode))
        .into_iter()
        .collect()
}

/// Σ̄ at an unobserved location: the filtered mean over its `K` nearest
/// training points, anchored at the nearest one.
pub fn regional_mean_at(
    query: &Location,
    cls: &[SpdMatrix],
    locations: &[Location],
    cfg: &IntrinsicConfig,
    mode: MetricMode,
) -> Result<SpdMatrix> {
    cfg.validate(locations.len())?;
    let idx = nearest_neighbors(locations, query, cfg.k_neighbors, mode);
    let members: Vec<SpdMatrix> = idx.iter().map(|&j| cls[j]).collect();
    filtered_mean(&members, cfg)
}

/// `ψᵢⱼ`, the geodesic midpoint of the regional means.
pub fn psi(i: usize, j: usize, regional: &[SpdMatrix]) -> Result<SpdMatrix> {
    if i == j {
        return Ok(regional[i]);
    }
    geodesic_midpoint(&regional[i], &regional[j])
}

/// How CLS matrices are assigned to locations away from the training set.
#[derive(Debug, Clone)]
pub enum ClsSource {
    /// No CLS (stationary kernels).
    Stationary,
    /// The same matrix everywhere.
    Constant(SpdMatrix),
    /// Latent-GP posterior means.
    Latent(Arc<LatentField>),
    /// The matrix of the nearest training point.
    Nearest,
}

/// CLS matrices attached to a training set, with the rule for extending them
/// to new locations.
#[derive(Debug, Clone)]
pub struct ClsAssignment {
    pub per_point: Vec<SpdMatrix>,
    /// Σ̄ᵢ, present once an intrinsic configuration has been applied.
    pub regional: Option<Vec<SpdMatrix>>,
    locations: Vec<Location>,
    mode: MetricMode,
    source: ClsSource,
    intrinsic: Option<IntrinsicConfig>,
}

impl ClsAssignment {
    pub fn stationary() -> Self {
        Self {
            per_point: Vec::new(),
            regional: None,
            locations: Vec::new(),
            mode: MetricMode::Euclidean,
            source: ClsSource::Stationary,
            intrinsic: None,
        }
    }

    pub fn constant(sigma: SpdMatrix, locations: &[Location], mode: MetricMode) -> Self {
        Self {
            per_point: vec![sigma; locations.len()],
            regional: None,
            locations: locations.to_vec(),
            mode,
            source: ClsSource::Constant(sigma),
            intrinsic: None,
        }
    }

    pub fn from_latent(field: Arc<LatentField>, locations: &[Location], mode: MetricMode) -> Result<Self> {
        let per_point = field.smoothed_cls()?;
        if per_point.len() != locations.len() {
            return Err(Error::BadDataset("latent field does not match the training set".into()));
        }
        Ok(Self {
            per_point,
            regional: None,
            locations: locations.to_vec(),
            mode,
            source: ClsSource::Latent(field),
            intrinsic: None,
        })
    }

    pub fn from_per_point(per_point: Vec<SpdMatrix>, locations: &[Location], mode: MetricMode) -> Result<Self> {
        if per_point.len() != locations.len() {
            return Err(Error::BadDataset(format!(
                "{} CLS matrices for {} locations",
                per_point.len(),
                locations.len()
            )));
        }
        Ok(Self {
            per_point,
            regional: None,
            locations: locations.to_vec(),
            mode,
            source: ClsSource::Nearest,
            intrinsic: None,
        })
    }

    /// Computes the regional means Σ̄ᵢ under `cfg`.
    pub fn with_intrinsic(mut self, cfg: IntrinsicConfig) -> Result<Self> {
        self.regional = Some(regional_means(&self.per_point, &self.locations, &cfg, self.mode)?);
        self.intrinsic = Some(cfg);
        Ok(self)
    }

    /// Restriction to a subset of training points; the extension rule is kept
    /// and regional means are dropped.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            per_point: idx.iter().map(|&i| self.per_point[i]).collect(),
            regional: None,
            locations: idx.iter().map(|&i| self.locations[i]).collect(),
            mode: self.mode,
            source: self.source.clone(),
            intrinsic: None,
        }
    }

    pub fn source(&self) -> &ClsSource {
        &self.source
    }

    pub fn intrinsic(&self) -> Option<&IntrinsicConfig> {
        self.intrinsic.as_ref()
    }

    pub fn locations(&self) -> &[Location] {
        &self.locations
    }

    /// Per-site CLS for the `n` training points under `kind`.
    pub fn training_sites(&self, kind: KernelKind, n: usize) -> Result<Vec<SiteCls>> {
        let mats = match kind {
            KernelKind::StatIso | KernelKind::StatAniso => return Ok(vec![None; n]),
            KernelKind::NonStationary => &self.per_point,
            KernelKind::IntrinsicNonStationary => self.regional.as_ref().ok_or_else(|| {
                Error::InvalidConfig("intrinsic kernel needs regional CLS means".into())
            })?,
        };
        if mats.len() != n {
            return Err(Error::InvalidConfig(format!(
                "{kind} kernel needs {n} CLS matrices, got {}",
                mats.len()
            )));
        }
        Ok(mats.iter().copied().map(Some).collect())
    }

    /// Per-site CLS at new locations under `kind`.
    pub fn query_sites(&self, kind: KernelKind, queries: &[Location]) -> Result<Vec<SiteCls>> {
        match kind {
            KernelKind::StatIso | KernelKind::StatAniso => Ok(vec![None; queries.len()]),
            KernelKind::NonStationary => par::map_slice(queries, |q| self.extend(q).map(Some))
                .into_iter()
                .collect(),
            KernelKind::IntrinsicNonStationary => {
                let cfg = self.intrinsic.ok_or_else(|| {
                    Error::InvalidConfig("intrinsic kernel needs an intrinsic configuration".into())
                })?;
                par::map_slice(queries, |q| {
                    regional_mean_at(q, &self.per_point, &self.locations, &cfg, self.mode).map(Some)
                })
                .into_iter()
                .collect()
            }
        }
    }

    fn extend(&self, q: &Location) -> Result<SpdMatrix> {
        match &self.source {
            ClsSource::Stationary => Err(Error::InvalidConfig("no CLS field to extend".into())),
            ClsSource::Constant(s) => Ok(*s),
            ClsSource::Latent(field) => sigma_from_eigenparams(&field.at(q)?),
            ClsSource::Nearest => {
                let j = nearest_neighbors(&self.locations, q, 1, self.mode)
                    .first()
                    .copied()
                    .ok_or_else(|| Error::BadDataset("empty training set".into()))?;
                Ok(self.per_point[j])
            }
        }
    }
}

pub const CLS_HEADER: [&str; 5] = ["lat_deg", "lon_deg", "s11", "s12", "s22"];

/// Writes one CLS matrix per location.
pub fn write_cls_csv(path: impl AsRef<Path>, locations: &[Location], cls: &[SpdMatrix]) -> Result<()> {
    let rows: Vec<Vec<String>> = locations
        .iter()
        .zip(cls)
        .map(|(l, s)| {
            let (a, b, c) = s.entries();
            vec![l.lat().to_string(), l.lon().to_string(), a.to_string(), b.to_string(), c.to_string()]
        })
        .collect();
    geo::write_table(path.as_ref(), &CLS_HEADER, &rows)
}

/// Reads a CLS dump back.
pub fn load_cls_csv(path: impl AsRef<Path>) -> Result<Vec<(Location, SpdMatrix)>> {
    let path = path.as_ref();
    let mut reader = geo::open_csv(path)?;
    geo::check_header(path, &mut reader, &CLS_HEADER)?;
    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = row as u64 + 2;
        let mut vals = [0.0; 5];
        for (k, name) in CLS_HEADER.iter().enumerate() {
            vals[k] = geo::parse_field(path, line, name, record.get(k))?;
        }
        let loc = geo::location_at(path, line, vals[0], vals[1])?;
        out.push((loc, SpdMatrix::from_entries(vals[2], vals[3], vals[4])?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::E;

    fn close(a: &SpdMatrix, b: &SpdMatrix, tol: f64) -> bool {
        (a.matrix() - b.matrix()).abs().max() <= tol
    }

    fn line_locations(n: usize) -> Vec<Location> {
        (0..n).map(|i| Location::new(i as f64, 0.5 * i as f64).unwrap()).collect()
    }

    #[test]
    fn eigenparam_examples() {
        let s = sigma_from_eigenparams(&EigenParams::new(1.0, 0.0, 1.0, 2.0).unwrap()).unwrap();
        assert!(close(&s, &SpdMatrix::diag(1.0, 2.0).unwrap(), 1e-15));
        let e = EigenParams::new(0.0, 1.0, E.ln(), (E * E).ln()).unwrap();
        let s = sigma_from_eigenparams(&e).unwrap();
        assert!(close(&s, &SpdMatrix::diag(2.0, 1.0).unwrap(), 1e-15));
        assert!(matches!(
            sigma_from_eigenparams(&EigenParams { u: 0.0, v: 1e-13, log_lam1: 1.0, log_lam2: 1.0 }),
            Err(Error::DegenerateRotation)
        ));
    }

    #[test]
    fn eigenparams_round_trip_through_spd() {
        let s = SpdMatrix::from_axes(5.0, 0.5, 0.7).unwrap();
        let e = EigenParams::from_spd(&s);
        assert!(e.u >= 0.0);
        assert!(close(&sigma_from_eigenparams(&e).unwrap(), &s, 1e-12));
        // Determinant identity.
        let s2 = sigma_from_eigenparams(&EigenParams::new(0.3, -2.0, 0.4, 7.0).unwrap()).unwrap();
        assert_abs_diff_eq!(s2.det(), 2.8, epsilon = 1e-12);
    }

    #[test]
    fn smoothing_limits() {
        let locs = line_locations(12);
        let raw: Vec<EigenParams> = (0..12)
            .map(|i| {
                let t = i as f64;
                EigenParams::new(1.0 + 0.3 * t.sin(), 0.2 * t.cos(), 1.0 + 0.5 * (0.7 * t).sin().abs(), 2.0 + t * 0.1)
                    .unwrap()
            })
            .collect();
        let wide = smooth_cls(&raw, &locs, &LatentHyper::uniform(1e6, 0.1), LatentInput::OneD, MetricMode::Euclidean)
            .unwrap();
        let mean_u = raw.iter().map(|e| e.u).sum::<f64>() / 12.0;
        for e in &wide {
            assert!((e.u - mean_u).abs() < 1e-3);
        }
        let narrow = smooth_cls(&raw, &locs, &LatentHyper::uniform(1e-6, 0.0), LatentInput::OneD, MetricMode::Euclidean)
            .unwrap();
        for (a, b) in narrow.iter().zip(&raw) {
            assert!((a.u - b.u).abs() < 1e-6 && (a.v - b.v).abs() < 1e-6);
            assert!((a.log_lam1 - b.log_lam1).abs() < 1e-6 && (a.log_lam2 - b.log_lam2).abs() < 1e-6);
        }
    }

    #[test]
    fn latent_field_matches_smoothed_values_at_training_points() {
        let locs = line_locations(9);
        let raw: Vec<EigenParams> = (0..9)
            .map(|i| EigenParams::new(1.0, 0.1 * i as f64, 1.0 + 0.1 * i as f64, 3.0).unwrap())
            .collect();
        let f = LatentField::fit(&raw, &locs, &LatentHyper::uniform(2.0, 0.3), LatentInput::TwoD, MetricMode::Euclidean)
            .unwrap();
        for (x, e) in locs.iter().zip(f.smoothed()) {
            let g = f.at(x).unwrap();
            assert_abs_diff_eq!(g.u, e.u, epsilon = 1e-10);
            assert_abs_diff_eq!(g.log_lam2, e.log_lam2, epsilon = 1e-10);
        }
    }

    #[test]
    fn alignment_only_flips_signs() {
        let mut p = vec![
            EigenParams::new(0.1, 1.0, 1.0, 2.0).unwrap(),
            EigenParams::new(0.1, -1.0, 1.0, 2.0).unwrap(),
            EigenParams::new(-0.05, 1.0, 1.0, 2.0).unwrap(),
        ];
        let before: Vec<_> = p.iter().map(|e| sigma_from_eigenparams(e).unwrap()).collect();
        align_orientations(&mut p);
        assert!(p[0].v.signum() == p[2].v.signum());
        for (e, s) in p.iter().zip(&before) {
            assert!(close(&sigma_from_eigenparams(e).unwrap(), s, 1e-14));
        }
    }

    fn neighborhood(outlier: Option<SpdMatrix>) -> (Vec<SpdMatrix>, Vec<Location>) {
        let common = SpdMatrix::from_entries(2.0, 0.3, 1.0).unwrap();
        let mut cls = vec![common; 8];
        if let Some(o) = outlier {
            cls[5] = o;
        }
        let locs = (0..8).map(|k| Location::new(k as f64 * 0.1, 0.0).unwrap()).collect();
        (cls, locs)
    }

    #[test]
    fn constant_neighborhood_and_outlier_removal() {
        let common = SpdMatrix::from_entries(2.0, 0.3, 1.0).unwrap();
        let cfg = IntrinsicConfig {
            k_neighbors: 8,
            deviation_threshold: 1.0,
            ..IntrinsicConfig::default()
        };
        let (cls, locs) = neighborhood(None);
        assert!(close(&regional_mean_cls(0, &cls, &locs, &cfg, MetricMode::Euclidean).unwrap(), &common, 1e-10));

        let (cls, locs) = neighborhood(Some(SpdMatrix::diag(400.0, 0.01).unwrap()));
        let filtered = regional_mean_cls(0, &cls, &locs, &cfg, MetricMode::Euclidean).unwrap();
        assert!(close(&filtered, &common, 1e-10));

        let open = IntrinsicConfig {
            deviation_threshold: f64::INFINITY,
            ..cfg
        };
        let unfiltered = regional_mean_cls(0, &cls, &locs, &open, MetricMode::Euclidean).unwrap();
        let plain = sorted_karcher(&cls).unwrap();
        assert_eq!(unfiltered, plain);
        assert!(!close(&unfiltered, &common, 1e-3));
    }

    #[test]
    fn center_survives_its_own_deviation() {
        let (mut cls, locs) = neighborhood(None);
        cls[0] = SpdMatrix::diag(400.0, 0.01).unwrap();
        let cfg = IntrinsicConfig {
            k_neighbors: 8,
            deviation_threshold: 1.0,
            min_survivors: 1,
            ..IntrinsicConfig::default()
        };
        let m = regional_mean_cls(0, &cls, &locs, &cfg, MetricMode::Euclidean).unwrap();
        assert!(!close(&m, &cls[1], 1e-3));
    }

    #[test]
    fn psi_examples() {
        let regional = vec![SpdMatrix::identity(), SpdMatrix::diag(4.0, 4.0).unwrap(), SpdMatrix::identity()];
        assert_eq!(psi(1, 1, &regional).unwrap(), regional[1]);
        assert!(close(&psi(0, 2, &regional).unwrap(), &regional[0], 0.0));
        assert!(close(&psi(0, 1, &regional).unwrap(), &SpdMatrix::diag(2.0, 2.0).unwrap(), 1e-14));
        assert_eq!(psi(0, 1, &regional).unwrap(), psi(1, 0, &regional).unwrap());
    }

    #[test]
    fn too_many_neighbors_is_reported() {
        let (cls, locs) = neighborhood(None);
        let cfg = IntrinsicConfig {
            k_neighbors: 9,
            ..IntrinsicConfig::default()
        };
        assert!(matches!(
            regional_mean_cls(0, &cls, &locs, &cfg, MetricMode::Euclidean),
            Err(Error::InsufficientNeighbors { requested: 9, available: 8 })
        ));
    }

    #[test]
    fn cls_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cls.csv");
        let locs = line_locations(3);
        let cls = vec![
            SpdMatrix::from_entries(2.0, 0.3, 1.0).unwrap(),
            SpdMatrix::identity(),
            SpdMatrix::from_axes(3.0, 0.1, 0.4).unwrap(),
        ];
        write_cls_csv(&p, &locs, &cls).unwrap();
        let back = load_cls_csv(&p).unwrap();
        for ((l, s), (l2, s2)) in locs.iter().zip(&cls).zip(&back) {
            assert_eq!(l, l2);
            assert_eq!(s.entries(), s2.entries());
        }
    }
}
