//! Matérn covariance functions and Gram-matrix assembly.
//!
//! Four kernel kinds share one Matérn profile `K_S(ν, √Q)` and differ only in
//! the quadratic form `Q` and the determinant prefactor:
//!
//! | kind | `Q` | prefactor |
//! |------|-----|-----------|
//! | `StatIso` | `|d|² / ℓ²` | 1 |
//! | `StatAniso` | `dᵀ Σ⁻¹ d` | 1 |
//! | `NonStationary` | `dᵀ ((Σᵢ+Σⱼ)/2)⁻¹ d` | `|Σᵢ|^¼ |Σⱼ|^¼ / |(Σᵢ+Σⱼ)/2|^½` |
//! | `IntrinsicNonStationary` | `dᵀ ψᵢⱼ⁻¹ d` | `|Σ̄ᵢ|^¼ |Σ̄ⱼ|^¼ / |ψᵢⱼ|^½` |
//!
//! where `ψᵢⱼ` is the geodesic midpoint of the regional means `Σ̄ᵢ`, `Σ̄ⱼ`.

use nalgebra::{Cholesky, DMatrix, Dyn, Matrix2};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::bessel::bessel_k_scaled;
use crate::cls::ClsAssignment;
use crate::error::{Error, Result};
use crate::geo::{displacement, Displacement, Location, MetricMode};
use crate::par;
use crate::spd::{geodesic_midpoint, SpdMatrix};

/// Characteristic length scale of a stationary kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LengthScale {
    Iso(f64),
    Aniso(SpdMatrix),
}

impl LengthScale {
    /// CLS as a matrix (`ℓ² I` for the isotropic case).
    pub fn matrix(&self) -> Result<SpdMatrix> {
        match *self {
            LengthScale::Iso(ell) => SpdMatrix::scaled_identity(ell * ell),
            LengthScale::Aniso(s) => Ok(s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaternParams {
    /// Smoothness.
    pub nu: f64,
    /// Signal standard deviation.
    pub sigma_f: f64,
    /// Noise standard deviation.
    pub sigma_n: f64,
    /// Used by the stationary kinds only.
    pub length_scale: LengthScale,
}

impl MaternParams {
    pub fn new(nu: f64, sigma_f: f64, sigma_n: f64, length_scale: LengthScale) -> Result<Self> {
        let p = Self {
            nu,
            sigma_f,
            sigma_n,
            length_scale,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.nu <= 50.0) {
            return Err(Error::InvalidConfig(format!("nu must be in (0, 50], got {}", self.nu)));
        }
        if !(self.sigma_f > 0.0 && self.sigma_f.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma_f must be positive, got {}", self.sigma_f)));
        }
        if !(self.sigma_n >= 0.0 && self.sigma_n.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma_n must be nonnegative, got {}", self.sigma_n)));
        }
        if let LengthScale::Iso(ell) = self.length_scale {
            if !(ell > 0.0 && ell.is_finite()) {
                return Err(Error::InvalidConfig(format!("length scale must be positive, got {ell}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum KernelKind {
    #[serde(rename = "stat-iso")]
    StatIso,
    #[serde(rename = "stat-aniso")]
    StatAniso,
    #[serde(rename = "nsgp")]
    NonStationary,
    #[serde(rename = "insgp")]
    IntrinsicNonStationary,
}

impl KernelKind {
    pub const ALL: [KernelKind; 4] = [
        KernelKind::StatIso,
        KernelKind::StatAniso,
        KernelKind::NonStationary,
        KernelKind::IntrinsicNonStationary,
    ];

    pub fn is_stationary(&self) -> bool {
        matches!(self, KernelKind::StatIso | KernelKind::StatAniso)
    }

    /// Command-line spelling.
    pub fn cli_name(&self) -> &'static str {
        match self {
            KernelKind::StatIso => "stat-iso",
            KernelKind::StatAniso => "stat-aniso",
            KernelKind::NonStationary => "nsgp",
            KernelKind::IntrinsicNonStationary => "insgp",
        }
    }

    /// Name used in report tables.
    pub fn label(&self) -> &'static str {
        match self {
            KernelKind::StatIso => "StatGP-iso",
            KernelKind::StatAniso => "StatGP",
            KernelKind::NonStationary => "NSGP",
            KernelKind::IntrinsicNonStationary => "iNSGP",
        }
    }
}

impl std::fmt::Display for KernelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl std::str::FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KernelKind::ALL
            .into_iter()
            .find(|k| k.cli_name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown kernel `{s}`")))
    }
}

/// How the non-stationary determinant prefactor is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrefactorForm {
    /// Reduces exactly to the stationary kernel when all CLS are equal.
    #[default]
    Normalized,
    /// Carries an extra `2^{d/2}` factor (2 for d = 2).
    Literal,
}

impl PrefactorForm {
    fn scale(&self) -> f64 {
        match self {
            PrefactorForm::Normalized => 1.0,
            PrefactorForm::Literal => 2.0,
        }
    }
}

/// Matérn correlation `2^{1−ν}/Γ(ν) · r^ν K_ν(r)` with `r = √(2ν) · √Q`.
pub fn matern_correlation(nu: f64, sqrt_q: f64) -> f64 {
    let r = (2.0 * nu).sqrt() * sqrt_q;
    if r == 0.0 {
        return 1.0;
    }
    if nu == 0.5 {
        return (-r).exp();
    }
    if nu == 1.5 {
        return (1.0 + r) * (-r).exp();
    }
    if nu == 2.5 {
        return (1.0 + r + r * r / 3.0) * (-r).exp();
    }
    if r < 1e-12 {
        return 1.0;
    }
    let ln = (1.0 - nu) * std::f64::consts::LN_2 - ln_gamma(nu) + nu * r.ln()
        + bessel_k_scaled(nu, r).ln()
        - r;
    ln.exp().min(1.0)
}

/// Matérn covariance `σ_f² · correlation`; equals `σ_f²` at `Q = 0`.
pub fn matern_scalar(nu: f64, sqrt_q: f64, sigma_f: f64) -> f64 {
    sigma_f * sigma_f * matern_correlation(nu, sqrt_q)
}

/// `dᵀ Σ⁻¹ d`.
pub fn quad_form(d: &Displacement, sigma: &SpdMatrix) -> f64 {
    quad_form_inv(d, &sigma.inverse())
}

fn quad_form_inv(d: &Displacement, inv: &Matrix2<f64>) -> f64 {
    let v = &d.0;
    let q = inv[(0, 0)] * v[0] * v[0] + 2.0 * inv[(0, 1)] * v[0] * v[1] + inv[(1, 1)] * v[1] * v[1];
    q.max(0.0)
}

/// Determinant prefactor and inverse of the averaged CLS for the
/// non-stationary kernel.
fn ns_terms(si: &SpdMatrix, sj: &SpdMatrix, form: PrefactorForm) -> Result<(f64, Matrix2<f64>)> {
    let avg = SpdMatrix::new((si.matrix() + sj.matrix()) * 0.5)?;
    let pre = form.scale() * (si.det() * sj.det()).powf(0.25) / avg.det().sqrt();
    Ok((pre, avg.inverse()))
}

fn intrinsic_terms(
    sbar_i: &SpdMatrix,
    sbar_j: &SpdMatrix,
    psi: &SpdMatrix,
    form: PrefactorForm,
) -> (f64, Matrix2<f64>) {
    let pre = form.scale() * (sbar_i.det() * sbar_j.det()).powf(0.25) / psi.det().sqrt();
    (pre, psi.inverse())
}

/// Non-stationary Matérn between two locations with local CLS `si`, `sj`.
pub fn ns_matern(
    xi: &Location,
    xj: &Location,
    si: &SpdMatrix,
    sj: &SpdMatrix,
    p: &MaternParams,
    mode: MetricMode,
) -> Result<f64> {
    ns_matern_with(xi, xj, si, sj, p, mode, PrefactorForm::Normalized)
}

pub fn ns_matern_with(
    xi: &Location,
    xj: &Location,
    si: &SpdMatrix,
    sj: &SpdMatrix,
    p: &MaternParams,
    mode: MetricMode,
    form: PrefactorForm,
) -> Result<f64> {
    let (pre, inv) = ns_terms(si, sj, form)?;
    let q = quad_form_inv(&displacement(xi, xj, mode), &inv);
    Ok(pre * matern_scalar(p.nu, q.sqrt(), p.sigma_f))
}

/// Intrinsic non-stationary Matérn with regional means `sbar_i`, `sbar_j`
/// and their pairwise CLS `psi`.
pub fn intrinsic_ns_matern(
    xi: &Location,
    xj: &Location,
    sbar_i: &SpdMatrix,
    sbar_j: &SpdMatrix,
    psi: &SpdMatrix,
    p: &MaternParams,
    mode: MetricMode,
) -> f64 {
    let (pre, inv) = intrinsic_terms(sbar_i, sbar_j, psi, PrefactorForm::Normalized);
    let q = quad_form_inv(&displacement(xi, xj, mode), &inv);
    pre * matern_scalar(p.nu, q.sqrt(), p.sigma_f)
}

/// A fully specified covariance function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance {
    pub kind: KernelKind,
    pub params: MaternParams,
    pub mode: MetricMode,
    pub prefactor: PrefactorForm,
}

/// CLS attached to one evaluation site.
pub type SiteCls = Option<SpdMatrix>;

impl Covariance {
    pub fn new(kind: KernelKind, params: MaternParams, mode: MetricMode) -> Self {
        Self {
            kind,
            params,
            mode,
            prefactor: PrefactorForm::Normalized,
        }
    }

    fn stationary_inverse(&self) -> Result<Matrix2<f64>> {
        Ok(self.params.length_scale.matrix()?.inverse())
    }

    /// Covariance divided by `σ_f²`.
    pub fn correlation(&self, xa: &Location, ca: &SiteCls, xb: &Location, cb: &SiteCls) -> Result<f64> {
        let d = displacement(xa, xb, self.mode);
        let (pre, inv) = match self.kind {
            KernelKind::StatIso | KernelKind::StatAniso => (1.0, self.stationary_inverse()?),
            KernelKind::NonStationary => {
                let (a, b) = site_pair(ca, cb)?;
                ns_terms(a, b, self.prefactor)?
            }
            KernelKind::IntrinsicNonStationary => {
                let (a, b) = site_pair(ca, cb)?;
                let psi = geodesic_midpoint(a, b)?;
                intrinsic_terms(a, b, &psi, self.prefactor)
            }
        };
        let q = quad_form_inv(&d, &inv);
        Ok(pre * matern_correlation(self.params.nu, q.sqrt()))
    }

    pub fn eval(&self, xa: &Location, ca: &SiteCls, xb: &Location, cb: &SiteCls) -> Result<f64> {
        Ok(self.signal_variance() * self.correlation(xa, ca, xb, cb)?)
    }

    pub fn signal_variance(&self) -> f64 {
        self.params.sigma_f * self.params.sigma_f
    }

    /// Prior variance at a site, `k(x, x)`.
    pub fn prior_variance(&self) -> f64 {
        let scale = if self.kind.is_stationary() {
            1.0
        } else {
            self.prefactor.scale()
        };
        self.signal_variance() * scale
    }

    /// Correlation matrix (covariance / `σ_f²`) over the sites.
    ///
    /// Each unordered pair is evaluated once; rows are filled in parallel.
    pub fn correlation_matrix(&self, locations: &[Location], cls: &[SiteCls]) -> Result<DMatrix<f64>> {
        let n = locations.len();
        check_sites(self.kind, n, cls)?;
        if self.kind.is_stationary() {
            // Hoist the single CLS inverse out of the pair loop.
            let inv = self.stationary_inverse()?;
            let nu = self.params.nu;
            let mut buf = vec![0.0; n * n];
            par::fill_rows(&mut buf, n, |i, row| {
                for j in 0..=i {
                    let d = displacement(&locations[i], &locations[j], self.mode);
                    row[j] = matern_correlation(nu, quad_form_inv(&d, &inv).sqrt());
                }
            });
            return Ok(mirror_lower(buf, n));
        }
        let mut buf = vec![0.0; n * n];
        let failure = std::sync::Mutex::new(None);
        par::fill_rows(&mut buf, n, |i, row| {
            for j in 0..=i {
                match self.correlation(&locations[i], &cls[i], &locations[j], &cls[j]) {
                    Ok(v) => row[j] = v,
                    Err(e) => {
                        failure.lock().unwrap().get_or_insert(e);
                        return;
                    }
                }
            }
        });
        if let Some(e) = failure.into_inner().unwrap() {
            return Err(e);
        }
        Ok(mirror_lower(buf, n))
    }

    /// Cross-covariance rows: `out[(a, i)] = k(query_a, train_i)`.
    pub fn cross_covariance(
        &self,
        queries: &[Location],
        query_cls: &[SiteCls],
        train: &[Location],
        train_cls: &[SiteCls],
    ) -> Result<DMatrix<f64>> {
        check_sites(self.kind, queries.len(), query_cls)?;
        check_sites(self.kind, train.len(), train_cls)?;
        let m = train.len();
        let sf2 = self.signal_variance();
        let rows = par::map_range(queries.len(), |a| -> Result<Vec<f64>> {
            (0..m)
                .map(|i| Ok(sf2 * self.correlation(&queries[a], &query_cls[a], &train[i], &train_cls[i])?))
                .collect()
        });
        let mut out = DMatrix::zeros(queries.len(), m);
        for (a, row) in rows.into_iter().enumerate() {
            for (i, v) in row?.into_iter().enumerate() {
                out[(a, i)] = v;
            }
        }
        Ok(out)
    }

    /// Gram matrix `K` (without noise) for a training set and CLS assignment.
    pub fn gram(&self, locations: &[Location], cls: &ClsAssignment) -> Result<DMatrix<f64>> {
        let sites = cls.training_sites(self.kind, locations.len())?;
        Ok(self.correlation_matrix(locations, &sites)? * self.signal_variance())
    }
}

fn site_pair<'a>(a: &'a SiteCls, b: &'a SiteCls) -> Result<(&'a SpdMatrix, &'a SpdMatrix)> {
    match (a, b) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(Error::InvalidConfig(
            "non-stationary kernels need a CLS matrix at every site".into(),
        )),
    }
}

fn check_sites(kind: KernelKind, n: usize, cls: &[SiteCls]) -> Result<()> {
    if !kind.is_stationary() && cls.len() != n {
        return Err(Error::InvalidConfig(format!(
            "{kind} kernel needs {n} CLS matrices, got {}",
            cls.len()
        )));
    }
    Ok(())
}

fn mirror_lower(buf: Vec<f64>, n: usize) -> DMatrix<f64> {
    // `buf` is row-major with the lower triangle filled; that is the upper
    // triangle in nalgebra's column-major layout.
    let mut m = DMatrix::from_vec(n, n, buf);
    for j in 0..n {
        for i in 0..j {
            m[(j, i)] = m[(i, j)];
        }
    }
    m
}

/// Adaptive diagonal jitter, relative to the mean diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterPolicy {
    pub start: f64,
    pub max: f64,
    /// Multiplier between attempts.
    pub factor: f64,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        Self {
            start: 1e-10,
            max: 1e-4,
            factor: 10.0,
        }
    }
}

/// A Cholesky factor of `K + σ_n² I + jitter·I`.
#[derive(Debug, Clone)]
pub struct Factorized {
    pub chol: Cholesky<f64, Dyn>,
    /// Absolute jitter added to the diagonal (0 when none was needed).
    pub jitter: f64,
}

/// Adds `noise_var` to the diagonal and factorizes, escalating jitter on failure.
pub fn factorize(mut k: DMatrix<f64>, noise_var: f64, policy: &JitterPolicy) -> Result<Factorized> {
    let n = k.nrows();
    for i in 0..n {
        k[(i, i)] += noise_var;
    }
    if let Some(chol) = Cholesky::new(k.clone()) {
        return Ok(Factorized { chol, jitter: 0.0 });
    }
    let mean_diag = (0..n).map(|i| k[(i, i)]).sum::<f64>() / n.max(1) as f64;
    let mut rel = policy.start;
    let mut last = 0.0;
    while rel <= policy.max * (1.0 + 1e-9) {
        let jitter = rel * mean_diag;
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(kj) {
            log::debug!("cholesky needed jitter {jitter:e} ({rel:e} of mean diagonal)");
            return Ok(Factorized { chol, jitter });
        }
        last = jitter;
        rel *= policy.factor;
    }
    Err(Error::NotPositiveDefinite { jitter: last })
}
