//! Riemannian statistics on 2×2 symmetric positive definite matrices.
//!
//! Everything here uses the affine-invariant metric. Tangent vectors are
//! stored in ambient coordinates (`b`), and their size is measured in
//! whitened coordinates `base^{-1/2} b base^{-1/2}`, where the Frobenius norm
//! equals the Riemannian norm at `base`. Under that convention
//! `‖log_map(a, b)‖² = 2·geodesic_distance(a, b)²`, because the distance
//! carries a factor ½ under the square root.
//!
//! Matrix square roots, logarithms and exponentials are computed from a
//! closed-form symmetric eigendecomposition.

use std::cmp::Ordering;

use nalgebra::{Matrix2, Matrix4, Vector4};

use crate::error::{Error, Result};

/// Largest eigenvalue ratio accepted for an [`SpdMatrix`].
pub const MAX_CONDITION: f64 = 1e12;

/// Default Karcher-mean tolerance on the whitened mean-tangent norm.
pub const KARCHER_TOL: f64 = 1e-10;
pub const KARCHER_MAX_ITER: usize = 100;

/// Closed-form eigendecomposition of a symmetric 2×2 matrix.
///
/// Eigenvalues are `(major, minor)`; the major eigenvector is
/// `(cos, sin)` and the minor one `(-sin, cos)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymEigen {
    pub major: f64,
    pub minor: f64,
    pub cos: f64,
    pub sin: f64,
}

impl SymEigen {
    pub fn of(m: &Matrix2<f64>) -> Self {
        let (a, b, c) = (m[(0, 0)], 0.5 * (m[(0, 1)] + m[(1, 0)]), m[(1, 1)]);
        let mid = 0.5 * (a + c);
        let half_gap = 0.5 * (a - c);
        let r = half_gap.hypot(b);
        let (sin, cos) = match (b == 0.0, a >= c) {
            (true, true) => (0.0, 1.0),
            (true, false) => (1.0, 0.0),
            _ => (0.5 * (2.0 * b).atan2(a - c)).sin_cos(),
        };
        Self {
            major: mid + r,
            minor: mid - r,
            cos,
            sin,
        }
    }

    /// `V diag(f(major), f(minor)) Vᵀ`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix2<f64> {
        self.compose(f(self.major), f(self.minor))
    }

    fn compose(&self, f1: f64, f2: f64) -> Matrix2<f64> {
        let (c, s) = (self.cos, self.sin);
        let off = c * s * (f1 - f2);
        Matrix2::new(c * c * f1 + s * s * f2, off, off, s * s * f1 + c * c * f2)
    }
}

fn symmetrize(m: &Matrix2<f64>) -> Matrix2<f64> {
    let off = 0.5 * (m[(0, 1)] + m[(1, 0)]);
    Matrix2::new(m[(0, 0)], off, off, m[(1, 1)])
}

/// Exponential of a symmetric matrix.
pub fn sym_exp(m: &Matrix2<f64>) -> Matrix2<f64> {
    SymEigen::of(m).map(f64::exp)
}

/// A 2×2 symmetric positive definite matrix with its eigendecomposition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpdMatrix {
    m: Matrix2<f64>,
    eig: SymEigen,
}

impl SpdMatrix {
    /// Symmetrizes `m` and checks positivity and conditioning.
    pub fn new(m: Matrix2<f64>) -> Result<Self> {
        let m = symmetrize(&m);
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure(format!("non-finite matrix {m:?}")));
        }
        let mut eig = SymEigen::of(&m);
        // The smaller eigenvalue is more accurate from the determinant when
        // the spectrum is spread out.
        if eig.major > 0.0 {
            let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(0, 1)];
            let via_det = det / eig.major;
            if eig.minor < 0.5 * eig.major {
                eig.minor = via_det;
            }
        }
        if eig.minor <= 0.0 || eig.major <= 0.0 {
            return Err(Error::NumericalFailure(format!(
                "matrix is not positive definite (eigenvalues {:e}, {:e})",
                eig.major, eig.minor
            )));
        }
        if eig.major / eig.minor > MAX_CONDITION {
            return Err(Error::NumericalFailure(format!(
                "condition number {:e} exceeds {MAX_CONDITION:e}",
                eig.major / eig.minor
            )));
        }
        Ok(Self { m, eig })
    }

    pub fn from_entries(s11: f64, s12: f64, s22: f64) -> Result<Self> {
        Self::new(Matrix2::new(s11, s12, s12, s22))
    }

    pub fn identity() -> Self {
        Self::diag(1.0, 1.0).expect("identity is SPD")
    }

    pub fn diag(a: f64, b: f64) -> Result<Self> {
        Self::new(Matrix2::new(a, 0.0, 0.0, b))
    }

    pub fn scaled_identity(s: f64) -> Result<Self> {
        Self::diag(s, s)
    }

    /// Builds `R(θ) diag(major, minor) R(θ)ᵀ`, the major axis at angle `theta`.
    pub fn from_axes(major: f64, minor: f64, theta: f64) -> Result<Self> {
        let (s, c) = theta.sin_cos();
        let eig = SymEigen {
            major,
            minor,
            cos: c,
            sin: s,
        };
        Self::new(eig.compose(major, minor))
    }

    pub fn matrix(&self) -> &Matrix2<f64> {
        &self.m
    }

    pub fn eigen(&self) -> &SymEigen {
        &self.eig
    }

    /// `(major, minor)` eigenvalues.
    pub fn eigenvalues(&self) -> (f64, f64) {
        (self.eig.major, self.eig.minor)
    }

    /// Angle of the major axis in `(-π/2, π/2]`.
    pub fn major_axis_angle(&self) -> f64 {
        let mut t = self.eig.sin.atan2(self.eig.cos);
        if t <= -std::f64::consts::FRAC_PI_2 {
            t += std::f64::consts::PI;
        } else if t > std::f64::consts::FRAC_PI_2 {
            t -= std::f64::consts::PI;
        }
        t
    }

    pub fn det(&self) -> f64 {
        self.eig.major * self.eig.minor
    }

    pub fn ln_det(&self) -> f64 {
        self.eig.major.ln() + self.eig.minor.ln()
    }

    pub fn inverse(&self) -> Matrix2<f64> {
        self.eig.map(f64::recip)
    }

    pub fn sqrt(&self) -> Matrix2<f64> {
        self.eig.map(f64::sqrt)
    }

    pub fn inv_sqrt(&self) -> Matrix2<f64> {
        self.eig.map(|v| v.sqrt().recip())
    }

    pub fn log(&self) -> Matrix2<f64> {
        self.eig.map(f64::ln)
    }

    /// `p ↦ S^p`.
    pub fn powf(&self, p: f64) -> Result<Self> {
        Self::new(self.eig.map(|v| v.powf(p)))
    }

    /// `A S Aᵀ` (congruence), e.g. a change of coordinates.
    pub fn congruence(&self, a: &Matrix2<f64>) -> Result<Self> {
        Self::new(a * self.m * a.transpose())
    }

    /// Whitens `other` by `self`: `self^{-1/2} other self^{-1/2}`.
    fn whiten(&self, other: &Matrix2<f64>) -> Matrix2<f64> {
        let w = self.inv_sqrt();
        symmetrize(&(w * other * w))
    }

    fn unwhiten(&self, other: &Matrix2<f64>) -> Matrix2<f64> {
        let r = self.sqrt();
        symmetrize(&(r * other * r))
    }

    fn ordering_key(&self) -> [f64; 3] {
        [self.m[(0, 0)], self.m[(0, 1)], self.m[(1, 1)]]
    }

    /// Total order on entries, used to make symmetric operations bitwise symmetric.
    pub fn canonical_cmp(&self, other: &Self) -> Ordering {
        let (a, b) = (self.ordering_key(), other.ordering_key());
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    }

    /// Entries `(s11, s12, s22)`.
    pub fn entries(&self) -> (f64, f64, f64) {
        (self.m[(0, 0)], self.m[(0, 1)], self.m[(1, 1)])
    }

    /// `exp([[a, c], [c, b]])`: an unconstrained chart of the SPD cone.
    pub fn from_log_coords(a: f64, b: f64, c: f64) -> Result<Self> {
        Self::new(sym_exp(&Matrix2::new(a, c, c, b)))
    }

    /// Inverse of [`SpdMatrix::from_log_coords`], as `[a, b, c]`.
    pub fn log_coords(&self) -> [f64; 3] {
        let l = self.log();
        [l[(0, 0)], l[(1, 1)], l[(0, 1)]]
    }
}

/// A symmetric tangent vector attached to an SPD base point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TangentVector {
    b: Matrix2<f64>,
    base: SpdMatrix,
}

impl TangentVector {
    pub fn new(b: Matrix2<f64>, base: SpdMatrix) -> Self {
        Self {
            b: symmetrize(&b),
            base,
        }
    }

    pub fn zero(base: SpdMatrix) -> Self {
        Self::new(Matrix2::zeros(), base)
    }

    /// Builds a tangent vector from whitened coordinates at `base`.
    pub fn from_whitened(w: Matrix2<f64>, base: SpdMatrix) -> Self {
        Self::new(base.unwhiten(&w), base)
    }

    pub fn ambient(&self) -> &Matrix2<f64> {
        &self.b
    }

    pub fn base(&self) -> &SpdMatrix {
        &self.base
    }

    pub fn whitened(&self) -> Matrix2<f64> {
        self.base.whiten(&self.b)
    }

    /// Riemannian norm at the base point.
    pub fn norm(&self) -> f64 {
        self.whitened().norm()
    }

    /// Whitened coordinates as a column-major 4-vector.
    pub fn coords(&self) -> Vector4<f64> {
        let w = self.whitened();
        Vector4::new(w[(0, 0)], w[(1, 0)], w[(0, 1)], w[(1, 1)])
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::new(self.b * s, self.base)
    }
}

/// Affine-invariant geodesic distance `sqrt(½ Σ ln² ηᵢ)`.
///
/// Arguments are put in a canonical order first, so the result is
/// bitwise symmetric; equal arguments give exactly zero.
pub fn geodesic_distance(a: &SpdMatrix, b: &SpdMatrix) -> Result<f64> {
    let (a, b) = match a.canonical_cmp(b) {
        Ordering::Equal => return Ok(0.0),
        Ordering::Greater => (b, a),
        Ordering::Less => (a, b),
    };
    let (_, ln1, ln2) = relative_log_spectrum(a, b)?;
    Ok((0.5 * (ln1 * ln1 + ln2 * ln2)).sqrt())
}

/// Logarithm map: the tangent vector at `base` pointing to `target`.
pub fn log_map(base: &SpdMatrix, target: &SpdMatrix) -> Result<TangentVector> {
    Ok(TangentVector::from_whitened(whitened_log(base, target)?, *base))
}

/// Eigendecomposition of `base^{-1/2} target base^{-1/2}` with the logs of
/// its eigenvalues; the minor one comes from the determinant ratio when the
/// spectrum is spread out.
fn relative_log_spectrum(base: &SpdMatrix, target: &SpdMatrix) -> Result<(SymEigen, f64, f64)> {
    let w = base.whiten(target.matrix());
    let eig = SymEigen::of(&w);
    if !(eig.major > 0.0) || !eig.major.is_finite() {
        return Err(Error::NumericalFailure("generalized eigenvalue solve failed".into()));
    }
    let ln1 = eig.major.ln();
    let ln2 = if eig.minor > 0.5 * eig.major {
        eig.minor.ln()
    } else {
        target.ln_det() - base.ln_det() - ln1
    };
    Ok((eig, ln1, ln2))
}

fn whitened_log(base: &SpdMatrix, target: &SpdMatrix) -> Result<Matrix2<f64>> {
    if base == target {
        return Ok(Matrix2::zeros());
    }
    let (eig, ln1, ln2) = relative_log_spectrum(base, target)?;
    Ok(eig.compose(ln1, ln2))
}

/// Exponential map `base^{1/2} exp(base^{-1/2} v base^{-1/2}) base^{1/2}`.
pub fn exp_map(base: &SpdMatrix, v: &TangentVector) -> Result<SpdMatrix> {
    let w = base.whiten(v.ambient());
    SpdMatrix::new(base.unwhiten(&sym_exp(&w)))
}

/// Mean whitened log at `mean` and the sum of squared tangent norms.
fn tangent_mean(mean: &SpdMatrix, set: &[SpdMatrix]) -> Result<(Matrix2<f64>, f64)> {
    let mut grad = Matrix2::zeros();
    let mut cost = 0.0;
    for s in set {
        let w = whitened_log(mean, s)?;
        cost += w.norm_squared();
        grad += w;
    }
    Ok((grad / set.len() as f64, cost))
}

/// Result of a converged Karcher-mean iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KarcherMean {
    pub mean: SpdMatrix,
    pub iterations: usize,
    /// Whitened norm of the mean tangent vector at `mean`.
    pub gradient_norm: f64,
}

/// Riemannian (Karcher) mean by backtracking gradient descent from the
/// arithmetic mean.
///
/// On failure to reach `tol` within `max_iter`, returns
/// [`Error::NonConvergence`] carrying the best iterate.
pub fn karcher_mean(set: &[SpdMatrix], tol: f64, max_iter: usize) -> Result<KarcherMean> {
    if set.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    if set.len() == 1 {
        return Ok(KarcherMean {
            mean: set[0],
            iterations: 0,
            gradient_norm: 0.0,
        });
    }
    let n = set.len() as f64;
    let arithmetic = set.iter().fold(Matrix2::zeros(), |acc, s| acc + s.matrix()) / n;
    let mut mean = SpdMatrix::new(arithmetic)?;
    let (mut grad, mut cost) = tangent_mean(&mean, set)?;
    let mut best = (mean, f64::INFINITY);
    for iter in 0..=max_iter {
        let norm = grad.norm();
        if norm < best.1 {
            best = (mean, norm);
        }
        if norm < tol {
            return Ok(KarcherMean {
                mean,
                iterations: iter,
                gradient_norm: norm,
            });
        }
        if iter == max_iter {
            break;
        }
        // Unit step first, halved until the sum of squared distances drops
        // by a quarter of its first-order prediction. Once that drop is below
        // roundoff the gradient norm must shrink by a quarter instead.
        let slope = 2.0 * n * norm * norm;
        let mut step = 1.0;
        loop {
            let cand = SpdMatrix::new(mean.unwhiten(&sym_exp(&(grad * step))))?;
            let (g, c) = tangent_mean(&cand, set)?;
            let wanted = 0.25 * step * slope;
            let sufficient = if wanted > 1e-12 * cost {
                c <= cost - wanted
            } else {
                g.norm() <= 0.75 * norm
            };
            if sufficient || step < 1e-6 {
                mean = cand;
                grad = g;
                cost = c;
                break;
            }
            step *= 0.5;
        }
    }
    Err(Error::NonConvergence {
        best: best.0,
        iterations: max_iter,
        gradient_norm: best.1,
    })
}

/// Two-point Karcher mean in closed form, `a^{1/2}(a^{-1/2} b a^{-1/2})^{1/2} a^{1/2}`.
///
/// Bitwise symmetric in its arguments.
pub fn geodesic_midpoint(a: &SpdMatrix, b: &SpdMatrix) -> Result<SpdMatrix> {
    geodesic_point(a, b, 0.5)
}

/// Point at fraction `t` along the geodesic from `a` to `b`.
pub fn geodesic_point(a: &SpdMatrix, b: &SpdMatrix, t: f64) -> Result<SpdMatrix> {
    let (a, b, t) = match a.canonical_cmp(b) {
        Ordering::Equal => return Ok(*a),
        Ordering::Greater => (b, a, 1.0 - t),
        Ordering::Less => (a, b, t),
    };
    let (eig, ln1, ln2) = relative_log_spectrum(a, b)?;
    SpdMatrix::new(a.unwhiten(&eig.compose((t * ln1).exp(), (t * ln2).exp())))
}

/// Second-order spread of a set of SPD matrices around their mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dispersion {
    /// Covariance of whitened, vectorized tangent vectors.
    pub lambda: Matrix4<f64>,
    pub n_samples: usize,
}

impl Dispersion {
    pub fn trace(&self) -> f64 {
        self.lambda.trace()
    }
}

/// `Λ = 1/(N−1) Σ βₖβₖᵀ` over tangent vectors at `mean`.
pub fn dispersion(set: &[SpdMatrix], mean: &SpdMatrix) -> Result<Dispersion> {
    if set.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: set.len(),
        });
    }
    let mut lambda = Matrix4::zeros();
    for s in set {
        let beta = log_map(mean, s)?.coords();
        lambda += beta * beta.transpose();
    }
    lambda /= (set.len() - 1) as f64;
    Ok(Dispersion {
        lambda,
        n_samples: set.len(),
    })
}

/// Squared Riemannian tangent norm `‖log_map(mean, Σₖ)‖²` per element.
pub fn per_element_deviation(set: &[SpdMatrix], mean: &SpdMatrix) -> Result<Vec<f64>> {
    set.iter()
        .map(|s| Ok(whitened_log(mean, s)?.norm_squared()))
        .collect()
}
