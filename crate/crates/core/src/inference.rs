//! Hyperparameter inference: MAP fits of stationary kernels, block
//! random-walk Metropolis in an unconstrained space, and cross-validation
//! of the intrinsic neighborhood settings.

use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, LogNormal, Normal};

use crate::cls::{ClsAssignment, EigenParams, IntrinsicConfig, LatentField, LatentHyper, LatentInput};
use crate::error::{Error, Result};
use crate::experiments::nlpd;
use crate::geo::{self, MetricMode, SpatialDataset};
use crate::gp::{self, FitOptions};
use crate::kernels::{Covariance, JitterPolicy, KernelKind, LengthScale, MaternParams, PrefactorForm, SiteCls};
use crate::optimize::minimize;
use crate::spd::SpdMatrix;
use crate::{par, seeded_rng};

/// How a parameter maps to the sampler's unconstrained coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transform {
    /// `θ = exp(z)`.
    Positive,
    /// `θ = z`.
    Real,
}

impl Transform {
    pub fn to_natural(&self, z: f64) -> f64 {
        match self {
            Transform::Positive => z.exp(),
            Transform::Real => z,
        }
    }

    pub fn to_unconstrained(&self, theta: f64) -> f64 {
        match self {
            Transform::Positive => theta.ln(),
            Transform::Real => theta,
        }
    }

    /// `ln |dθ/dz|`.
    fn log_jacobian(&self, z: f64) -> f64 {
        match self {
            Transform::Positive => z,
            Transform::Real => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Prior {
    LogNormal { mu: f64, sigma: f64 },
    Normal { mu: f64, sigma: f64 },
    Flat,
}

impl Prior {
    /// The default for positive hyperparameters.
    pub const WEAK_LOGNORMAL: Prior = Prior::LogNormal { mu: 0.0, sigma: 2.0 };

    /// Log density at the natural-scale value `theta`.
    pub fn ln_pdf(&self, theta: f64) -> f64 {
        match *self {
            Prior::LogNormal { mu, sigma } => {
                if theta <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                LogNormal::new(mu, sigma).map_or(f64::NAN, |d| d.ln_pdf(theta))
            }
            Prior::Normal { mu, sigma } => Normal::new(mu, sigma).map_or(f64::NAN, |d| d.ln_pdf(theta)),
            Prior::Flat => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub transform: Transform,
    pub prior: Prior,
    /// Proposal sd in the unconstrained coordinate.
    pub proposal_sd: f64,
}

impl ParamSpec {
    pub fn positive(name: &str, proposal_sd: f64) -> Self {
        Self {
            name: name.to_string(),
            transform: Transform::Positive,
            prior: Prior::WEAK_LOGNORMAL,
            proposal_sd,
        }
    }

    pub fn real(name: &str, prior: Prior, proposal_sd: f64) -> Self {
        Self {
            name: name.to_string(),
            transform: Transform::Real,
            prior,
            proposal_sd,
        }
    }

    /// Log prior plus Jacobian at unconstrained `z`.
    fn ln_prior_z(&self, z: f64) -> f64 {
        self.prior.ln_pdf(self.transform.to_natural(z)) + self.transform.log_jacobian(z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub n_samples: usize,
    pub n_burnin: usize,
    /// Default proposal sd in log-space.
    pub proposal_sd: f64,
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            n_burnin: 500,
            proposal_sd: 0.1,
            seed: 0,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidConfig("mcmc n_samples must be positive".into()));
        }
        if !(self.proposal_sd >= 0.0 && self.proposal_sd.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "proposal sd must be nonnegative, got {}",
                self.proposal_sd
            )));
        }
        Ok(())
    }
}

/// Post-burn-in samples on the natural scale, one row per sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub names: Vec<String>,
    pub samples: Vec<Vec<f64>>,
    /// Fraction of accepted proposals after burn-in.
    pub acceptance_rate: f64,
    pub burnin_acceptance: f64,
    pub log_target: Vec<f64>,
}

impl Chain {
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s[j]).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Block random-walk Metropolis over `params`, starting at `init` (natural
/// scale). Each sweep updates the blocks in order with Gaussian steps in the
/// unconstrained space. Failed likelihood evaluations reject the proposal.
pub fn metropolis<F>(
    params: &[ParamSpec],
    blocks: &[Vec<usize>],
    init: &[f64],
    cfg: &McmcConfig,
    mut log_likelihood: F,
) -> Result<Chain>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    cfg.validate()?;
    assert_eq!(params.len(), init.len());
    let natural = |z: &[f64]| -> Vec<f64> { params.iter().zip(z).map(|(p, z)| p.transform.to_natural(*z)).collect() };
    let ln_prior = |z: &[f64]| -> f64 { params.iter().zip(z).map(|(p, z)| p.ln_prior_z(*z)).sum() };

    let mut rng = seeded_rng(cfg.seed);
    let mut z: Vec<f64> = params.iter().zip(init).map(|(p, t)| p.transform.to_unconstrained(*t)).collect();
    let mut current = log_likelihood(&natural(&z))? + ln_prior(&z);
    if !current.is_finite() {
        return Err(Error::NumericalFailure(format!("initial log target is {current}")));
    }

    let mut samples = Vec::with_capacity(cfg.n_samples);
    let mut log_target = Vec::with_capacity(cfg.n_samples);
    let (mut burn_acc, mut burn_tot, mut acc, mut tot) = (0usize, 0usize, 0usize, 0usize);
    for sweep in 0..cfg.n_burnin + cfg.n_samples {
        for block in blocks {
            let mut proposal = z.clone();
            for &j in block {
                let step: f64 = rng.sample(StandardNormal);
                proposal[j] += params[j].proposal_sd * step;
            }
            let u: f64 = rng.random();
            let candidate = match log_likelihood(&natural(&proposal)) {
                Ok(ll) => ll + ln_prior(&proposal),
                Err(e) => {
                    log::trace!("proposal rejected: {e}");
                    f64::NEG_INFINITY
                }
            };
            let accepted = candidate.is_finite() && u.ln() < candidate - current;
            if accepted {
                z = proposal;
                current = candidate;
            }
            if sweep < cfg.n_burnin {
                burn_tot += 1;
                burn_acc += accepted as usize;
            } else {
                tot += 1;
                acc += accepted as usize;
            }
        }
        if sweep >= cfg.n_burnin {
            samples.push(natural(&z));
            log_target.push(current);
        }
    }
    let burnin_acceptance = if burn_tot > 0 { burn_acc as f64 / burn_tot as f64 } else { f64::NAN };
    if burn_tot > 0 && burnin_acceptance < 0.01 {
        return Err(Error::AllProposalsRejected { rate: burnin_acceptance });
    }
    Ok(Chain {
        names: params.iter().map(|p| p.name.clone()).collect(),
        samples,
        acceptance_rate: if tot > 0 { acc as f64 / tot as f64 } else { f64::NAN },
        burnin_acceptance,
        log_target,
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-parameter posterior median.
pub fn posterior_point_estimate(chain: &Chain) -> Result<Vec<f64>> {
    if chain.is_empty() {
        return Err(Error::EmptyChain);
    }
    Ok((0..chain.names.len()).map(|j| median(chain.column(j))).collect())
}

/// Monte-Carlo standard error of the mean by non-overlapping batch means
/// with `⌊√n⌋` batches.
pub fn mcse_batch_means(series: &[f64]) -> f64 {
    let n = series.len();
    let n_batches = (n as f64).sqrt().floor() as usize;
    if n_batches < 2 {
        return f64::NAN;
    }
    let size = n / n_batches;
    let means: Vec<f64> = (0..n_batches)
        .map(|b| series[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let grand = means.iter().sum::<f64>() / n_batches as f64;
    let var = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (n_batches - 1) as f64;
    (var / n_batches as f64).sqrt()
}

pub fn write_chain_csv(path: impl AsRef<Path>, chain: &Chain) -> Result<()> {
    let header: Vec<&str> = chain.names.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = chain
        .samples
        .iter()
        .map(|s| s.iter().map(|v| v.to_string()).collect())
        .collect();
    geo::write_table(path.as_ref(), &header, &rows)
}

/// Reads a chain dump back as `(names, samples)`.
pub fn load_chain_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let path = path.as_ref();
    let mut reader = geo::open_csv(path)?;
    let names: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut samples = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = row as u64 + 2;
        let mut s = Vec::with_capacity(names.len());
        for (k, name) in names.iter().enumerate() {
            s.push(geo::parse_field(path, line, name, record.get(k))?);
        }
        samples.push(s);
    }
    Ok((names, samples))
}

/// Result of a MAP fit of a stationary kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationaryFit {
    pub sigma_f: f64,
    pub sigma_n: f64,
    /// `ℓ² I` for isotropic fits.
    pub cls: SpdMatrix,
    pub log_posterior: f64,
}

impl StationaryFit {
    pub fn params(&self, kind: KernelKind, nu: f64) -> Result<MaternParams> {
        let ls = match kind {
            KernelKind::StatIso => LengthScale::Iso(self.cls.eigenvalues().0.sqrt()),
            _ => LengthScale::Aniso(self.cls),
        };
        MaternParams::new(nu, self.sigma_f, self.sigma_n, ls)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationaryFitOptions {
    pub nu: f64,
    pub max_iter: u64,
    /// Starting point; defaults to a data-scale heuristic.
    pub start: Option<StationaryFit>,
}

impl Default for StationaryFitOptions {
    fn default() -> Self {
        Self {
            nu: 1.5,
            max_iter: 400,
            start: None,
        }
    }
}

/// Sd of the Normal prior on matrix-log CLS coordinates; matches a
/// lognormal(0, 2²) prior on an isotropic length scale, since `a = 2 ln ℓ`.
pub const LOG_COORD_PRIOR_SD: f64 = 4.0;

fn ln_normal(x: f64, sd: f64) -> f64 {
    -0.5 * (x / sd).powi(2) - (sd * (2.0 * std::f64::consts::PI).sqrt()).ln()
}

/// MAP estimate of a stationary Matérn (`StatIso` or `StatAniso`) with
/// `σ_f`, `σ_n`, `ℓ` under lognormal(0, 2²) priors, optimized in log space.
pub fn fit_stationary(
    train: &SpatialDataset,
    kind: KernelKind,
    mode: MetricMode,
    opts: &StationaryFitOptions,
) -> Result<StationaryFit> {
    if !kind.is_stationary() {
        return Err(Error::InvalidConfig(format!("{kind} is not a stationary kernel")));
    }
    let start = match opts.start {
        Some(s) => s,
        None => heuristic_start(train)?,
    };
    let iso = kind == KernelKind::StatIso;
    let build = |z: &[f64]| -> Result<Covariance> {
        let ls = if iso {
            LengthScale::Iso(z[2].exp())
        } else {
            LengthScale::Aniso(SpdMatrix::from_log_coords(z[2], z[3], z[4])?)
        };
        let p = MaternParams::new(opts.nu, z[0].exp(), z[1].exp(), ls)?;
        Ok(Covariance::new(kind, p, mode))
    };
    let ln_prior = |z: &[f64]| -> f64 {
        let base = ln_normal(z[0], 2.0) + ln_normal(z[1], 2.0);
        if iso {
            base + ln_normal(z[2], 2.0)
        } else {
            base + z[2..].iter().map(|&c| ln_normal(c, LOG_COORD_PRIOR_SD)).sum::<f64>()
        }
    };
    let neg_log_post = |z: &[f64]| -> f64 {
        let Ok(cov) = build(z) else { return f64::INFINITY };
        match gp::fit(train, &cov, &ClsAssignment::stationary(), &FitOptions::centered()) {
            Ok(g) => -(g.log_marginal_likelihood() + ln_prior(z)),
            Err(_) => f64::INFINITY,
        }
    };
    let mut z0 = vec![start.sigma_f.ln(), start.sigma_n.ln()];
    if iso {
        z0.push(0.25 * start.cls.ln_det());
    } else {
        z0.extend(start.cls.log_coords());
    }
    let step = vec![0.5; z0.len()];
    let best = minimize(neg_log_post, &z0, &step, opts.max_iter, 1e-6)?;
    let cov = build(&best.x)?;
    let cls = cov.params.length_scale.matrix()?;
    Ok(StationaryFit {
        sigma_f: cov.params.sigma_f,
        sigma_n: cov.params.sigma_n,
        cls,
        log_posterior: -best.value,
    })
}

fn heuristic_start(train: &SpatialDataset) -> Result<StationaryFit> {
    let n = train.len() as f64;
    let mean = train.mean();
    let var = train.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n.max(1.0);
    let sd = var.sqrt().max(1e-6);
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for l in train.locations() {
        for (k, c) in [l.lat(), l.lon()].into_iter().enumerate() {
            lo[k] = lo[k].min(c);
            hi[k] = hi[k].max(c);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let ell = if span > 0.0 { 0.2 * span } else { 1.0 };
    Ok(StationaryFit {
        sigma_f: sd,
        sigma_n: 0.3 * sd,
        cls: SpdMatrix::scaled_identity(ell * ell)?,
        log_posterior: f64::NAN,
    })
}

/// Everything a GP posterior over hyperparameters needs besides the
/// hyperparameters themselves.
#[derive(Debug, Clone)]
pub struct GpModel<'a> {
    pub train: &'a SpatialDataset,
    pub kind: KernelKind,
    pub mode: MetricMode,
    pub prefactor: PrefactorForm,
    pub jitter: JitterPolicy,
    pub cls: ClsModel<'a>,
    pub sample_nu: bool,
    /// Sample the stationary length scale; when false it stays at the
    /// template value.
    pub sample_length_scale: bool,
}

/// How the CLS of a non-stationary model is produced.
#[derive(Debug, Clone)]
pub enum ClsModel<'a> {
    /// Stationary kernels.
    None,
    /// Fixed CLS; only kernel hyperparameters are sampled.
    Fixed(ClsAssignment),
    /// Smoothed from raw estimates by latent GPs whose hyperparameters are
    /// sampled; the intrinsic kernel additionally applies `intrinsic`.
    Latent {
        raw: &'a [EigenParams],
        input: LatentInput,
        intrinsic: Option<IntrinsicConfig>,
    },
}

/// A point in hyperparameter space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpState {
    pub params: MaternParams,
    pub latent: Option<LatentHyper>,
}

impl<'a> GpModel<'a> {
    fn has_latent(&self) -> bool {
        matches!(self.cls, ClsModel::Latent { .. })
    }

    /// Parameter specs and the `(kernel, latent)` blocks.
    pub fn param_specs(&self, proposal_sd: f64) -> (Vec<ParamSpec>, Vec<Vec<usize>>) {
        let mut specs = vec![
            ParamSpec::positive("sigma_f", proposal_sd),
            ParamSpec::positive("sigma_n", proposal_sd),
        ];
        if self.sample_nu {
            specs.push(ParamSpec::positive("nu", proposal_sd));
        }
        match self.kind {
            _ if !self.sample_length_scale => {}
            KernelKind::StatIso => specs.push(ParamSpec::positive("ell", proposal_sd)),
            KernelKind::StatAniso => {
                let prior = Prior::Normal {
                    mu: 0.0,
                    sigma: LOG_COORD_PRIOR_SD,
                };
                for name in ["cls_log_a", "cls_log_b", "cls_log_c"] {
                    specs.push(ParamSpec::real(name, prior, proposal_sd));
                }
            }
            _ => {}
        }
        let kernel_block: Vec<usize> = (0..specs.len()).collect();
        let mut blocks = vec![kernel_block];
        if self.has_latent() {
            let start = specs.len();
            for name in LatentHyper::NAMES {
                specs.push(ParamSpec::positive(&format!("latent_{name}_ell"), proposal_sd));
                specs.push(ParamSpec::positive(&format!("latent_{name}_ratio"), proposal_sd));
            }
            blocks.push((start..specs.len()).collect());
        }
        (specs, blocks)
    }

    pub fn encode(&self, s: &GpState) -> Vec<f64> {
        let p = &s.params;
        let mut v = vec![p.sigma_f, p.sigma_n];
        if self.sample_nu {
            v.push(p.nu);
        }
        match (self.kind, p.length_scale) {
            _ if !self.sample_length_scale => {}
            (KernelKind::StatIso, LengthScale::Iso(l)) => v.push(l),
            (KernelKind::StatIso, LengthScale::Aniso(m)) => v.push(m.det().powf(0.25)),
            (KernelKind::StatAniso, ls) => {
                let m = ls.matrix().unwrap_or_else(|_| SpdMatrix::identity());
                v.extend(m.log_coords());
            }
            _ => {}
        }
        if self.has_latent() {
            v.extend(s.latent.expect("latent hyperparameters").to_vec());
        }
        v
    }

    pub fn decode(&self, v: &[f64], template: &MaternParams) -> Result<GpState> {
        let mut k = 2;
        let nu = if self.sample_nu {
            k += 1;
            v[2]
        } else {
            template.nu
        };
        let length_scale = match self.kind {
            _ if !self.sample_length_scale => template.length_scale,
            KernelKind::StatIso => {
                k += 1;
                LengthScale::Iso(v[k - 1])
            }
            KernelKind::StatAniso => {
                k += 3;
                LengthScale::Aniso(SpdMatrix::from_log_coords(v[k - 3], v[k - 2], v[k - 1])?)
            }
            _ => template.length_scale,
        };
        let params = MaternParams::new(nu, v[0], v[1], length_scale)?;
        let latent = self.has_latent().then(|| LatentHyper::from_slice(&v[k..k + 8]));
        Ok(GpState { params, latent })
    }

    /// CLS assignment for a state.
    pub fn assignment(&self, state: &GpState) -> Result<ClsAssignment> {
        match &self.cls {
            ClsModel::None => Ok(ClsAssignment::stationary()),
            ClsModel::Fixed(a) => Ok(a.clone()),
            ClsModel::Latent { raw, input, intrinsic } => {
                let hp = state
                    .latent
                    .ok_or_else(|| Error::InvalidConfig("latent hyperparameters missing".into()))?;
                let field = LatentField::fit(raw, self.train.locations(), &hp, *input, self.mode)?;
                let a = ClsAssignment::from_latent(Arc::new(field), self.train.locations(), self.mode)?;
                match (self.kind, intrinsic) {
                    (KernelKind::IntrinsicNonStationary, Some(cfg)) => a.with_intrinsic(*cfg),
                    (KernelKind::IntrinsicNonStationary, None) => {
                        Err(Error::InvalidConfig("intrinsic kernel needs an intrinsic configuration".into()))
                    }
                    _ => Ok(a),
                }
            }
        }
    }

    pub fn covariance(&self, params: &MaternParams) -> Covariance {
        Covariance {
            kind: self.kind,
            params: *params,
            mode: self.mode,
            prefactor: self.prefactor,
        }
    }

    pub fn fit(&self, state: &GpState) -> Result<gp::FittedGp> {
        let cls = self.assignment(state)?;
        gp::fit(
            self.train,
            &self.covariance(&state.params),
            &cls,
            &FitOptions {
                center: true,
                jitter: self.jitter,
            },
        )
    }
}

/// Correlation matrix cached against every hyperparameter except `σ_f`, `σ_n`.
struct CorrCache {
    key: Vec<f64>,
    cls: ClsAssignment,
    sites: Vec<SiteCls>,
    corr: DMatrix<f64>,
}

/// Output of [`mcmc_sample`].
#[derive(Debug, Clone)]
pub struct GpChain {
    pub chain: Chain,
    pub estimate: GpState,
}

/// Samples GP hyperparameters with target `log marginal likelihood + log
/// priors`, alternating kernel and latent blocks, and returns the chain with
/// its per-parameter median.
pub fn mcmc_sample(model: &GpModel, init: &GpState, cfg: &McmcConfig) -> Result<GpChain> {
    let (specs, blocks) = model.param_specs(cfg.proposal_sd);
    let template = init.params;
    let start = model.encode(init);
    let mut cache: Option<CorrCache> = None;
    let opts = FitOptions {
        center: true,
        jitter: model.jitter,
    };
    let chain = metropolis(&specs, &blocks, &start, cfg, |theta| {
        let state = model.decode(theta, &template)?;
        let key = theta[2..].to_vec();
        let cov = model.covariance(&state.params);
        let stale = cache.as_ref().is_none_or(|c| c.key != key);
        if stale {
            let cls = model.assignment(&state)?;
            let sites = cls.training_sites(model.kind, model.train.len())?;
            let corr = cov.correlation_matrix(model.train.locations(), &sites)?;
            cache = Some(CorrCache { key, cls, sites, corr });
        }
        let c = cache.as_ref().expect("cache filled above");
        let g = gp::fit_with_correlation(model.train, &cov, &c.cls, c.sites.clone(), &c.corr, &opts)?;
        Ok(g.log_marginal_likelihood())
    })?;
    let est = posterior_point_estimate(&chain)?;
    Ok(GpChain {
        estimate: model.decode(&est, &template)?,
        chain,
    })
}

/// Candidate neighborhood sizes and thresholds for [`cv_select`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvGrid {
    pub k_candidates: Vec<usize>,
    pub threshold_candidates: Vec<f64>,
    pub n_folds: usize,
}

impl Default for CvGrid {
    fn default() -> Self {
        Self {
            k_candidates: vec![4, 8, 16],
            threshold_candidates: vec![0.5, 2.0, f64::INFINITY],
            n_folds: 5,
        }
    }
}

impl CvGrid {
    pub fn validate(&self) -> Result<()> {
        if self.k_candidates.is_empty() || self.threshold_candidates.is_empty() {
            return Err(Error::InvalidConfig("cv grid candidate lists must be non-empty".into()));
        }
        if self.n_folds < 2 {
            return Err(Error::InvalidConfig(format!("cv needs at least 2 folds, got {}", self.n_folds)));
        }
        if self.threshold_candidates.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::InvalidConfig("cv thresholds must be positive".into()));
        }
        Ok(())
    }
}

/// One scored grid cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvCell {
    pub k: usize,
    pub threshold: f64,
    /// Mean held-out nLPD; `∞` when any fold failed.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub selected: IntrinsicConfig,
    pub cells: Vec<CvCell>,
}

/// Seeded partition of `0..n` into `n_folds` disjoint, exhaustive folds.
pub fn cv_folds(n: usize, n_folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded_rng(seed));
    let mut folds = vec![Vec::new(); n_folds];
    for (k, i) in idx.into_iter().enumerate() {
        folds[k % n_folds].push(i);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    folds
}

/// Chooses `(K, threshold)` for the intrinsic kernel by mean held-out nLPD.
///
/// `cls` carries the per-point CLS of the full training set; each fold
/// recomputes regional means on its own training part. Ties go to the
/// smaller `K`, then the smaller threshold.
pub fn cv_select(
    train: &SpatialDataset,
    cov: &Covariance,
    cls: &ClsAssignment,
    base: &IntrinsicConfig,
    grid: &CvGrid,
    seed: u64,
) -> Result<CvResult> {
    grid.validate()?;
    if train.len() < grid.n_folds {
        return Err(Error::InsufficientSamples {
            needed: grid.n_folds,
            got: train.len(),
        });
    }
    let folds = cv_folds(train.len(), grid.n_folds, seed);
    let mut ks = grid.k_candidates.clone();
    ks.sort_unstable();
    ks.dedup();
    let mut ts = grid.threshold_candidates.clone();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let pairs: Vec<(usize, f64)> = ks.iter().flat_map(|&k| ts.iter().map(move |&t| (k, t))).collect();
    let cov = Covariance {
        kind: KernelKind::IntrinsicNonStationary,
        ..*cov
    };
    let cells: Vec<CvCell> = par::map_slice(&pairs, |&(k, t)| {
        let cfg = IntrinsicConfig {
            k_neighbors: k,
            deviation_threshold: t,
            min_survivors: base.min_survivors.min(k),
            ..*base
        };
        let score = cv_score(train, &cov, cls, &cfg, &folds).unwrap_or_else(|e| {
            log::debug!("cv cell K={k} threshold={t} failed: {e}");
            f64::INFINITY
        });
        CvCell { k, threshold: t, score }
    });
    // Cells are in (K, threshold) ascending order, so the first minimum wins ties.
    let best = cells
        .iter()
        .fold(None::<&CvCell>, |b, c| match b {
            Some(b) if !(c.score < b.score) => Some(b),
            _ => Some(c),
        })
        .expect("grid is non-empty");
    Ok(CvResult {
        selected: IntrinsicConfig {
            k_neighbors: best.k,
            deviation_threshold: best.threshold,
            min_survivors: base.min_survivors.min(best.k),
            ..*base
        },
        cells,
    })
}

fn cv_score(
    train: &SpatialDataset,
    cov: &Covariance,
    cls: &ClsAssignment,
    cfg: &IntrinsicConfig,
    folds: &[Vec<usize>],
) -> Result<f64> {
    let n = train.len();
    let mut total = 0.0;
    for held in folds {
        let mut in_fold = vec![false; n];
        for &i in held {
            in_fold[i] = true;
        }
        let keep: Vec<usize> = (0..n).filter(|&i| !in_fold[i]).collect();
        let sub = train.subset(&keep)?;
        let test = train.subset(held)?;
        let a = cls.subset(&keep).with_intrinsic(*cfg)?;
        let g = gp::fit(&sub, cov, &a, &FitOptions::centered())?;
        let pred = g.predict_batch(test.locations())?;
        let score = nlpd(test.values(), &pred)?;
        if !score.is_finite() {
            return Err(Error::NumericalFailure("non-finite held-out nLPD".into()));
        }
        total += score;
    }
    Ok(total / folds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn conjugate_normal(seed: u64, n_samples: usize) -> (Chain, f64) {
        // y ~ N(θ, 1), θ ~ N(0, 10²).
        let y = [1.2, 0.4, 2.1, 1.7, 0.9];
        let prior_var = 100.0;
        let post_var = 1.0 / (1.0 / prior_var + y.len() as f64);
        let post_mean = post_var * y.iter().sum::<f64>();
        let spec = [ParamSpec::real("theta", Prior::Normal { mu: 0.0, sigma: 10.0 }, 0.8)];
        let cfg = McmcConfig {
            n_samples,
            n_burnin: 500,
            proposal_sd: 0.8,
            seed,
        };
        let chain = metropolis(&spec, &[vec![0]], &[0.0], &cfg, |t| {
            Ok(y.iter().map(|v| -0.5 * (v - t[0]).powi(2)).sum())
        })
        .unwrap();
        (chain, post_mean)
    }

    #[test]
    fn conjugate_normal_mean_within_three_standard_errors() {
        let (chain, want) = conjugate_normal(11, 20_000);
        let col = chain.column(0);
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let se = mcse_batch_means(&col);
        assert!((mean - want).abs() < 3.0 * se, "mean {mean}, want {want}, se {se}");
        let (again, _) = conjugate_normal(11, 20_000);
        assert_eq!(chain, again);
    }

    #[test]
    fn zero_proposal_accepts_everything() {
        let spec = [ParamSpec::positive("a", 0.0)];
        let cfg = McmcConfig {
            n_samples: 50,
            n_burnin: 10,
            proposal_sd: 0.0,
            seed: 1,
        };
        let chain = metropolis(&spec, &[vec![0]], &[2.5], &cfg, |t| Ok(-t[0])).unwrap();
        assert_eq!(chain.acceptance_rate, 1.0);
        assert!(chain.samples.iter().all(|s| s[0] == chain.samples[0][0]));
        assert_abs_diff_eq!(chain.samples[0][0], 2.5, epsilon = 1e-14);
    }

    #[test]
    fn hopeless_proposals_are_reported() {
        let spec = [ParamSpec::real("a", Prior::Flat, 1.0)];
        let cfg = McmcConfig {
            n_samples: 10,
            n_burnin: 100,
            proposal_sd: 1.0,
            seed: 1,
        };
        // Only the start point has finite density.
        let r = metropolis(&spec, &[vec![0]], &[0.0], &cfg, |t| {
            if t[0] == 0.0 {
                Ok(0.0)
            } else {
                Err(Error::NumericalFailure("outside support".into()))
            }
        });
        assert!(matches!(r, Err(Error::AllProposalsRejected { .. })));
    }

    #[test]
    fn positive_parameters_stay_positive() {
        let spec = [ParamSpec::positive("a", 1.5)];
        let cfg = McmcConfig {
            n_samples: 500,
            n_burnin: 50,
            proposal_sd: 1.5,
            seed: 2,
        };
        let chain = metropolis(&spec, &[vec![0]], &[1.0], &cfg, |_| Ok(0.0)).unwrap();
        assert!(chain.samples.iter().all(|s| s[0] > 0.0));
        assert!((0.0..=1.0).contains(&chain.acceptance_rate));
    }

    fn chain_of(v: &[f64]) -> Chain {
        Chain {
            names: vec!["x".into()],
            samples: v.iter().map(|x| vec![*x]).collect(),
            acceptance_rate: 1.0,
            burnin_acceptance: 1.0,
            log_target: vec![0.0; v.len()],
        }
    }

    #[test]
    fn median_point_estimates() {
        assert_eq!(posterior_point_estimate(&chain_of(&[3.0, 3.0, 3.0])).unwrap(), vec![3.0]);
        assert_eq!(posterior_point_estimate(&chain_of(&[3.0, 1.0, 2.0])).unwrap(), vec![2.0]);
        assert!(matches!(posterior_point_estimate(&chain_of(&[])), Err(Error::EmptyChain)));
        // Symmetric bimodal: modes at ±5, median near 0.
        let v: Vec<f64> = (0..1000).map(|i| if i % 2 == 0 { -5.0 - (i as f64) * 1e-4 } else { 5.0 + (i as f64) * 1e-4 }).collect();
        assert!(posterior_point_estimate(&chain_of(&v)).unwrap()[0].abs() < 5.1);
    }

    #[test]
    fn folds_are_disjoint_and_exhaustive() {
        let folds = cv_folds(23, 5, 9);
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert!(folds.iter().all(|f| f.len() == 4 || f.len() == 5));
        assert_eq!(folds, cv_folds(23, 5, 9));
    }

    #[test]
    fn chain_csv_has_named_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("chain.csv");
        write_chain_csv(&p, &chain_of(&[1.0, 2.5])).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "x\n1\n2.5\n");
    }
}
