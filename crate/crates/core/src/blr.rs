//! Bayesian linear regression over an arbitrary feature basis `Φ` with an
//! isotropic Gaussian prior `w ~ N(0, αI)` and Gaussian noise `σ²`.
//!
//! Everything goes through the Cholesky factor of the posterior precision
//! `A = V_N⁻¹ = I/α + ΦᵀΦ/σ²`, which is `(L+1)×(L+1)` regardless of `N`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, ensure_finite, Error, Result};
use crate::numkit::{dot, Cholesky, Mat};

/// Smallest noise variance accepted anywhere.
pub const MIN_NOISE_VAR: f64 = 1e-12;

/// Per-point Gaussian predictive: mean, total variance and its epistemic part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDist {
    pub mean: Vec<f64>,
    pub total_var: Vec<f64>,
    pub epistemic_var: Vec<f64>,
}

impl PredictiveDist {
    /// Build from means, epistemic variances and an additive aleatoric variance.
    /// Small negative epistemic values from round-off are clamped to 0.
    pub fn from_epistemic(mean: Vec<f64>, epistemic_var: Vec<f64>, noise_var: f64) -> Self {
        let epistemic_var: Vec<f64> = epistemic_var.into_iter().map(|v| v.max(0.0)).collect();
        let total_var = epistemic_var.iter().map(|v| v + noise_var).collect();
        Self {
            mean,
            total_var,
            epistemic_var,
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn total_std(&self) -> Vec<f64> {
        self.total_var.iter().map(|v| v.sqrt()).collect()
    }

    pub fn epistemic_std(&self) -> Vec<f64> {
        self.epistemic_var.iter().map(|v| v.sqrt()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlrPosterior {
    /// Posterior mean `w_N`.
    pub mean: Vec<f64>,
    /// Posterior covariance `V_N`.
    pub cov: Mat,
    pub alpha: f64,
    pub noise_var: f64,
}

fn check_hyper(alpha: f64, noise_var: f64) -> Result<()> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidConfig(format!("prior variance must be > 0, got {alpha}")));
    }
    if !(noise_var >= MIN_NOISE_VAR) || !noise_var.is_finite() {
        return Err(Error::InvalidConfig(format!("noise variance must be >= {MIN_NOISE_VAR:e}, got {noise_var}")));
    }
    Ok(())
}

/// Factor of `I/α + ΦᵀΦ/σ²` and `Φᵀy`.
fn precision(phi: &Mat, y: &[f64], alpha: f64, noise_var: f64) -> Result<(Cholesky, Vec<f64>)> {
    check_hyper(alpha, noise_var)?;
    ensure_dim("blr targets", phi.rows(), y.len())?;
    ensure_finite(phi.as_slice(), "feature matrix")?;
    ensure_finite(y, "targets")?;
    let mut a = phi.t_matmul(phi).scale(1.0 / noise_var);
    a.add_diag(1.0 / alpha);
    Ok((Cholesky::factor(&a)?, phi.t_matvec(y)))
}

/// Exact conjugate posterior. `N = 0` returns the prior.
pub fn fit_blr(phi: &Mat, y: &[f64], alpha: f64, noise_var: f64) -> Result<BlrPosterior> {
    let (chol, b) = precision(phi, y, alpha, noise_var)?;
    let mean = chol.solve_vec(&b).into_iter().map(|v| v / noise_var).collect();
    let mut cov = chol.inverse();
    symmetrize(&mut cov);
    Ok(BlrPosterior {
        mean,
        cov,
        alpha,
        noise_var,
    })
}

fn symmetrize(m: &mut Mat) {
    for i in 0..m.rows() {
        for j in (i + 1)..m.cols() {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

impl BlrPosterior {
    /// Prior `N(0, αI)` over `dim` weights.
    pub fn prior(dim: usize, alpha: f64, noise_var: f64) -> Result<Self> {
        fit_blr(&Mat::zeros(0, dim), &[], alpha, noise_var)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn predict(&self, phi: &Mat) -> Result<PredictiveDist> {
        predict_blr(self, phi)
    }
}

/// `μ = Φ*w_N`, epistemic `φᵀV_Nφ`, total `σ² + φᵀV_Nφ`.
pub fn predict_blr(post: &BlrPosterior, phi: &Mat) -> Result<PredictiveDist> {
    ensure_dim("blr query features", post.dim(), phi.cols())?;
    let mean = phi.matvec(&post.mean);
    let vphi = phi.matmul(&post.cov);
    let epistemic = (0..phi.rows()).map(|i| dot(phi.row(i), vphi.row(i))).collect();
    Ok(PredictiveDist::from_epistemic(mean, epistemic, post.noise_var))
}

/// `log N(y; 0, αΦΦᵀ + σ²I)` evaluated in the `(L+1)`-dimensional form.
pub fn log_marginal(phi: &Mat, y: &[f64], alpha: f64, noise_var: f64) -> Result<f64> {
    let (chol, b) = precision(phi, y, alpha, noise_var)?;
    Ok(evidence(&chol, &b, y, phi.cols(), alpha, noise_var))
}

fn evidence(chol: &Cholesky, b: &[f64], y: &[f64], m: usize, alpha: f64, noise_var: f64) -> f64 {
    let n = y.len() as f64;
    if y.is_empty() {
        return 0.0;
    }
    // |σ²I + αΦΦᵀ| = σ^{2N} α^M |A|;  yᵀC⁻¹y = yᵀy/σ² − bᵀA⁻¹b/σ⁴
    let z = chol.solve_lower(b);
    let quad = dot(y, y) / noise_var - dot(&z, &z) / (noise_var * noise_var);
    let log_det = n * noise_var.ln() + m as f64 * alpha.ln() + chol.log_det();
    -0.5 * (n * (2.0 * PI).ln() + log_det + quad)
}

/// Log evidence and its gradient with respect to `Φ`:
/// `∂/∂Φ = α·r rᵀΦ/σ⁴ − Φ V_N/σ²` with `r = y − Φ w_N`.
pub fn log_marginal_with_grad(phi: &Mat, y: &[f64], alpha: f64, noise_var: f64) -> Result<(f64, Mat)> {
    let (chol, b) = precision(phi, y, alpha, noise_var)?;
    let value = evidence(&chol, &b, y, phi.cols(), alpha, noise_var);
    if y.is_empty() {
        return Ok((value, Mat::zeros(0, phi.cols())));
    }
    let w: Vec<f64> = chol.solve_vec(&b).into_iter().map(|v| v / noise_var).collect();
    let r: Vec<f64> = phi.matvec(&w).iter().zip(y).map(|(f, t)| t - f).collect();
    let rt_phi = phi.t_matvec(&r);
    let v = chol.inverse();
    let phi_v = phi.matmul(&v);
    let s4 = noise_var * noise_var;
    let grad = Mat::from_fn(phi.rows(), phi.cols(), |i, j| alpha * r[i] * rt_phi[j] / s4 - phi_v[(i, j)] / noise_var);
    Ok((value, grad))
}

/// Mean of `log N(yᵢ; μᵢ, total varᵢ)`.
pub fn avg_log_likelihood(dist: &PredictiveDist, y: &[f64]) -> Result<f64> {
    ensure_dim("log-likelihood targets", dist.len(), y.len())?;
    if y.is_empty() {
        return Err(Error::EmptyInput("log-likelihood targets"));
    }
    let total: f64 = y
        .iter()
        .zip(&dist.mean)
        .zip(&dist.total_var)
        .map(|((t, m), v)| -0.5 * ((2.0 * PI * v).ln() + (t - m).powi(2) / v))
        .sum();
    Ok(total / y.len() as f64)
}

pub fn rmse(dist: &PredictiveDist, y: &[f64]) -> Result<f64> {
    ensure_dim("rmse targets", dist.len(), y.len())?;
    if y.is_empty() {
        return Err(Error::EmptyInput("rmse targets"));
    }
    let sse: f64 = y.iter().zip(&dist.mean).map(|(t, m)| (t - m).powi(2)).sum();
    Ok((sse / y.len() as f64).sqrt())
}
