//! Exact Gaussian-process regression.

use nalgebra::{DMatrix, DVector};

use crate::cls::ClsAssignment;
use crate::error::{Error, Result};
use crate::geo::{Location, SpatialDataset};
use crate::kernels::{factorize, Covariance, Factorized, JitterPolicy, SiteCls};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Number of query points whose cross-covariances are held in memory at once.
pub const PREDICT_BLOCK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictiveResult {
    pub mean: f64,
    /// Includes the observation noise `σ_n²`.
    pub variance: f64,
}

impl PredictiveResult {
    pub fn sd(&self) -> f64 {
        self.variance.sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[derive(Default)]
pub struct FitOptions {
    /// Subtract the training mean before fitting and add it back on prediction.
    pub center: bool,
    pub jitter: JitterPolicy,
}


impl FitOptions {
    pub fn centered() -> Self {
        Self {
            center: true,
            ..Self::default()
        }
    }
}

/// A GP conditioned on its training data.
#[derive(Debug, Clone)]
pub struct FittedGp {
    cov: Covariance,
    cls: ClsAssignment,
    locations: Vec<Location>,
    sites: Vec<SiteCls>,
    y: DVector<f64>,
    offset: f64,
    factor: Factorized,
    alpha: DVector<f64>,
}

/// Conditions a GP with covariance `cov` on `train`.
pub fn fit(train: &SpatialDataset, cov: &Covariance, cls: &ClsAssignment, opts: &FitOptions) -> Result<FittedGp> {
    let sites = cls.training_sites(cov.kind, train.len())?;
    let corr = cov.correlation_matrix(train.locations(), &sites)?;
    fit_with_correlation(train, cov, cls, sites, &corr, opts)
}

/// As [`fit`], reusing a correlation matrix (covariance over `σ_f²`) that was
/// assembled for the same sites.
pub fn fit_with_correlation(
    train: &SpatialDataset,
    cov: &Covariance,
    cls: &ClsAssignment,
    sites: Vec<SiteCls>,
    corr: &DMatrix<f64>,
    opts: &FitOptions,
) -> Result<FittedGp> {
    let n = train.len();
    if corr.nrows() != n || corr.ncols() != n {
        return Err(Error::BadDataset(format!(
            "correlation matrix is {}x{}, expected {n}x{n}",
            corr.nrows(),
            corr.ncols()
        )));
    }
    let offset = if opts.center { train.mean() } else { 0.0 };
    let y = DVector::from_iterator(n, train.values().iter().map(|v| v - offset));
    let k = corr * cov.signal_variance();
    let factor = factorize(k, cov.params.sigma_n.powi(2), &opts.jitter)?;
    let alpha = factor.chol.solve(&y);
    Ok(FittedGp {
        cov: *cov,
        cls: cls.clone(),
        locations: train.locations().to_vec(),
        sites,
        y,
        offset,
        factor,
        alpha,
    })
}

impl FittedGp {
    pub fn covariance(&self) -> &Covariance {
        &self.cov
    }

    pub fn cls(&self) -> &ClsAssignment {
        &self.cls
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// Lower Cholesky factor of `K + σ_n² I + jitter·I`.
    pub fn chol_l(&self) -> DMatrix<f64> {
        self.factor.chol.l()
    }

    /// Absolute diagonal jitter that was needed for the factorization.
    pub fn jitter(&self) -> f64 {
        self.factor.jitter
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn n_train(&self) -> usize {
        self.locations.len()
    }

    /// `−½ yᵀα − Σ ln Lᵢᵢ − (n/2) ln 2π`.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.y.len() as f64;
        let l = self.factor.chol.l_dirty();
        let half_ln_det: f64 = (0..self.y.len()).map(|i| l[(i, i)].ln()).sum();
        -0.5 * self.y.dot(&self.alpha) - half_ln_det - 0.5 * n * LN_2PI
    }

    pub fn predict(&self, x: &Location) -> Result<PredictiveResult> {
        Ok(self.predict_batch(std::slice::from_ref(x))?[0])
    }

    /// Predictive distributions at each query, in order.
    pub fn predict_batch(&self, queries: &[Location]) -> Result<Vec<PredictiveResult>> {
        let sites = self.cls.query_sites(self.cov.kind, queries)?;
        self.predict_with_sites(queries, &sites)
    }

    /// As [`FittedGp::predict_batch`] with explicit query CLS.
    pub fn predict_with_sites(&self, queries: &[Location], sites: &[SiteCls]) -> Result<Vec<PredictiveResult>> {
        let noise = self.cov.params.sigma_n.powi(2);
        let mut out = Vec::with_capacity(queries.len());
        for (qs, ss) in queries.chunks(PREDICT_BLOCK).zip(sites.chunks(PREDICT_BLOCK)) {
            let kstar = self.cov.cross_covariance(qs, ss, &self.locations, &self.sites)?;
            let mean = &kstar * &self.alpha;
            let mut v = kstar.transpose();
            self.factor.chol.l_dirty().solve_lower_triangular_mut(&mut v);
            for (a, (x, c)) in qs.iter().zip(ss).enumerate() {
                let kss = self.cov.eval(x, c, x, c)?;
                let explained = v.column(a).norm_squared();
                let raw = kss - explained + noise;
                if raw < noise - 1e-8 {
                    log::warn!(
                        "predictive variance {raw:e} below noise floor {noise:e} at ({}, {}); clamped",
                        x.lat(),
                        x.lon()
                    );
                }
                out.push(PredictiveResult {
                    mean: mean[a] + self.offset,
                    variance: raw.max(noise),
                });
            }
        }
        Ok(out)
    }
}
