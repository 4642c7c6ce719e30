//! Gaussian class densities and the population-pair functions built on them.
//!
//! A [`PopulationPair`] holds the two class densities `f` (type X) and `g`
//! (type Y) together with their Poisson intensities `mu` and `nu`. Every
//! function the classifiers and the regret expansion need is available with
//! exact analytic derivatives:
//!
//! - `psi(z) = mu f / (mu f + nu g)`, the finite-intensity mark probability;
//! - `rho(z) = p f / (p f + (1 - p) g)` with `p = mu / (mu + nu)`;
//! - `lambda(z) = p / (1 - p) f + g`, the prior-weighted density sum;
//! - the sampling density `(mu f + nu g) / (mu + nu)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DensityError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("dimension must be at least 1")]
    EmptyDimension,
    #[error("covariance must be {d}x{d} ({} entries), got {got}", d * d)]
    CovarianceShape { d: usize, got: usize },
    #[error("covariance is not symmetric (entry ({row}, {col}) differs by {diff:e})")]
    NotSymmetric { row: usize, col: usize, diff: f64 },
    #[error("covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("intensities must be positive and finite (mu = {mu}, nu = {nu})")]
    InvalidIntensity { mu: f64, nu: f64 },
    #[error("region bound {index} is empty: lower {lower} >= upper {upper}")]
    EmptyRegion { index: usize, lower: f64, upper: f64 },
}

pub type Result<T> = std::result::Result<T, DensityError>;

const SYMMETRY_TOL: f64 = 1e-12;

/// Value, gradient and Hessian (row-major) of a density at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityEval {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub hessian: Vec<f64>,
}

/// A d-variate normal density.
///
/// The precision matrix and the lower Cholesky factor are computed once at
/// construction; evaluation and sampling only do small dense mat-vecs.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSpec {
    mean: Vec<f64>,
    covariance: Vec<f64>,
    precision: Vec<f64>,
    chol_lower: Vec<f64>,
    log_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    /// Row-major `d x d` covariance.
    pub covariance: Vec<f64>,
}

impl GaussianSpec {
    pub fn new(mean: Vec<f64>, covariance: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(DensityError::EmptyDimension);
        }
        if covariance.len() != d * d {
            return Err(DensityError::CovarianceShape {
                d,
                got: covariance.len(),
            });
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(DensityError::NonFinite("mean"));
        }
        if covariance.iter().any(|v| !v.is_finite()) {
            return Err(DensityError::NonFinite("covariance"));
        }
        for row in 0..d {
            for col in (row + 1)..d {
                let diff = (covariance[row * d + col] - covariance[col * d + row]).abs();
                if diff > SYMMETRY_TOL {
                    return Err(DensityError::NotSymmetric { row, col, diff });
                }
            }
        }
        let cov = DMatrix::from_row_slice(d, d, &covariance);
        let chol = cov
            .clone()
            .cholesky()
            .ok_or(DensityError::NotPositiveDefinite)?;
        let lower = chol.l();
        let inverse = chol.inverse();
        let log_det: f64 = 2.0 * (0..d).map(|i| lower[(i, i)].ln()).sum::<f64>();
        let log_norm = -0.5 * (d as f64) * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det;

        let mut precision = vec![0.0; d * d];
        let mut chol_lower = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                precision[i * d + j] = inverse[(i, j)];
                chol_lower[i * d + j] = lower[(i, j)];
            }
        }
        Ok(Self {
            mean,
            covariance,
            precision,
            chol_lower,
            log_norm,
        })
    }

    /// Standard normal in `d` dimensions.
    pub fn standard(d: usize) -> Result<Self> {
        Self::isotropic(vec![0.0; d], 1.0)
    }

    /// `N(mean, variance * I)`.
    pub fn isotropic(mean: Vec<f64>, variance: f64) -> Result<Self> {
        let d = mean.len();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            cov[i * d + i] = variance;
        }
        Self::new(mean, cov)
    }

    /// Unit-variance bivariate normal with the given correlation.
    pub fn bivariate(mean: [f64; 2], correlation: f64) -> Result<Self> {
        Self::new(mean.to_vec(), vec![1.0, correlation, correlation, 1.0])
    }

    pub fn from_params(params: &GaussianParams) -> Result<Self> {
        Self::new(params.mean.clone(), params.covariance.clone())
    }

    pub fn params(&self) -> GaussianParams {
        GaussianParams {
            mean: self.mean.clone(),
            covariance: self.covariance.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &[f64] {
        &self.covariance
    }

    /// Lower Cholesky factor of the covariance, row-major.
    pub fn cholesky_lower(&self) -> &[f64] {
        &self.chol_lower
    }

    fn check_dim(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(DensityError::DimensionMismatch {
                expected: self.dim(),
                got: z.len(),
            });
        }
        Ok(())
    }

    /// Writes `P (z - m)` into `out` and returns the quadratic form.
    fn whitened(&self, z: &[f64], out: &mut [f64]) -> f64 {
        let d = self.dim();
        let mut quad = 0.0;
        for i in 0..d {
            let mut s = 0.0;
            for j in 0..d {
                s += self.precision[i * d + j] * (z[j] - self.mean[j]);
            }
            out[i] = s;
            quad += s * (z[i] - self.mean[i]);
        }
        quad
    }

    /// Density value only. Panics in debug builds on a dimension mismatch.
    pub fn pdf(&self, z: &[f64]) -> f64 {
        debug_assert_eq!(z.len(), self.dim());
        let d = self.dim();
        let mut quad = 0.0;
        for i in 0..d {
            let di = z[i] - self.mean[i];
            let mut s = 0.0;
            for j in 0..d {
                s += self.precision[i * d + j] * (z[j] - self.mean[j]);
            }
            quad += s * di;
        }
        (self.log_norm - 0.5 * quad).exp()
    }

    /// Value and gradient.
    pub fn pdf_gradient(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_dim(z)?;
        let mut w = vec![0.0; self.dim()];
        let quad = self.whitened(z, &mut w);
        let value = (self.log_norm - 0.5 * quad).exp();
        let gradient = w.iter().map(|wi| -value * wi).collect();
        Ok((value, gradient))
    }

    /// Value, gradient and Hessian:
    /// `grad = -f P(z-m)`, `hess = f (P(z-m)(z-m)^T P - P)`.
    pub fn eval(&self, z: &[f64]) -> Result<DensityEval> {
        self.check_dim(z)?;
        let d = self.dim();
        let mut w = vec![0.0; d];
        let quad = self.whitened(z, &mut w);
        let value = (self.log_norm - 0.5 * quad).exp();
        let gradient = w.iter().map(|wi| -value * wi).collect();
        let mut hessian = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                hessian[i * d + j] = value * (w[i] * w[j] - self.precision[i * d + j]);
            }
        }
        Ok(DensityEval {
            value,
            gradient,
            hessian,
        })
    }
}

/// Free-function form of [`GaussianSpec::eval`].
pub fn eval_density(spec: &GaussianSpec, z: &[f64]) -> Result<DensityEval> {
    spec.eval(z)
}

/// Axis-aligned box `[lower, upper]` over which risks are integrated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Region {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() {
            return Err(DensityError::EmptyDimension);
        }
        if lower.len() != upper.len() {
            return Err(DensityError::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        for (index, (&lo, &hi)) in lower.iter().zip(&upper).enumerate() {
            if !lo.is_finite() || !hi.is_finite() {
                return Err(DensityError::NonFinite("region"));
            }
            if lo >= hi {
                return Err(DensityError::EmptyRegion {
                    index,
                    lower: lo,
                    upper: hi,
                });
            }
        }
        Ok(Self { lower, upper })
    }

    /// `[lower, upper]^d`.
    pub fn cube(d: usize, lower: f64, upper: f64) -> Result<Self> {
        Self::new(vec![lower; d], vec![upper; d])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn volume(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| hi - lo)
            .product()
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        z.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }
}

/// Value, gradient and per-coordinate second derivatives of `rho`.
#[derive(Debug, Clone, PartialEq)]
pub struct RhoEval {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub second_diag: Vec<f64>,
}

/// Two class densities with their Poisson intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationPair {
    f: GaussianSpec,
    g: GaussianSpec,
    mu: f64,
    nu: f64,
}

impl PopulationPair {
    pub fn new(f: GaussianSpec, g: GaussianSpec, mu: f64, nu: f64) -> Result<Self> {
        if f.dim() != g.dim() {
            return Err(DensityError::DimensionMismatch {
                expected: f.dim(),
                got: g.dim(),
            });
        }
        if !(mu.is_finite() && nu.is_finite() && mu > 0.0 && nu > 0.0) {
            return Err(DensityError::InvalidIntensity { mu, nu });
        }
        Ok(Self { f, g, mu, nu })
    }

    /// Same densities, new intensities.
    pub fn with_intensities(&self, mu: f64, nu: f64) -> Result<Self> {
        Self::new(self.f.clone(), self.g.clone(), mu, nu)
    }

    pub fn f(&self) -> &GaussianSpec {
        &self.f
    }

    pub fn g(&self) -> &GaussianSpec {
        &self.g
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn dim(&self) -> usize {
        self.f.dim()
    }

    /// Prior weight of the X population, `mu / (mu + nu)`.
    pub fn p(&self) -> f64 {
        self.mu / (self.mu + self.nu)
    }

    pub fn total_intensity(&self) -> f64 {
        self.mu + self.nu
    }

    fn check_dim(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(DensityError::DimensionMismatch {
                expected: self.dim(),
                got: z.len(),
            });
        }
        Ok(())
    }

    /// Probability that a point of the marked process at `z` is of type X.
    pub fn psi(&self, z: &[f64]) -> f64 {
        let a = self.mu * self.f.pdf(z);
        let b = self.nu * self.g.pdf(z);
        a / (a + b)
    }

    /// `rho` with analytic first derivatives and the diagonal of its Hessian.
    pub fn rho(&self, z: &[f64]) -> Result<RhoEval> {
        self.check_dim(z)?;
        let p = self.p();
        let fe = self.f.eval(z)?;
        let ge = self.g.eval(z)?;
        let d = self.dim();
        let a = p * fe.value;
        let b = (1.0 - p) * ge.value;
        let den = a + b;
        let mut gradient = Vec::with_capacity(d);
        let mut second_diag = Vec::with_capacity(d);
        for j in 0..d {
            let aj = p * fe.gradient[j];
            let bj = (1.0 - p) * ge.gradient[j];
            let ajj = p * fe.hessian[j * d + j];
            let bjj = (1.0 - p) * ge.hessian[j * d + j];
            let num = aj * b - a * bj;
            let num_j = ajj * b - a * bjj;
            let den_j = aj + bj;
            gradient.push(num / (den * den));
            second_diag.push(num_j / (den * den) - 2.0 * num * den_j / (den * den * den));
        }
        Ok(RhoEval {
            value: a / den,
            gradient,
            second_diag,
        })
    }

    /// `lambda = p / (1 - p) f + g` and its gradient.
    pub fn weighted_lambda(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_dim(z)?;
        let ratio = self.mu / self.nu;
        let (fv, fg) = self.f.pdf_gradient(z)?;
        let (gv, gg) = self.g.pdf_gradient(z)?;
        let gradient = fg.iter().zip(&gg).map(|(a, b)| ratio * a + b).collect();
        Ok((ratio * fv + gv, gradient))
    }

    /// Density the pooled training points are drawn from.
    pub fn mixture_density(&self, z: &[f64]) -> f64 {
        (self.mu * self.f.pdf(z) + self.nu * self.g.pdf(z)) / (self.mu + self.nu)
    }
}

pub fn posterior_psi(pair: &PopulationPair, z: &[f64]) -> Result<f64> {
    pair.check_dim(z)?;
    Ok(pair.psi(z))
}

pub fn limit_rho(pair: &PopulationPair, z: &[f64]) -> Result<RhoEval> {
    pair.rho(z)
}

pub fn weighted_lambda(pair: &PopulationPair, z: &[f64]) -> Result<(f64, Vec<f64>)> {
    pair.weighted_lambda(z)
}

pub fn mixture_density(pair: &PopulationPair, z: &[f64]) -> Result<f64> {
    pair.check_dim(z)?;
    Ok(pair.mixture_density(z))
}
