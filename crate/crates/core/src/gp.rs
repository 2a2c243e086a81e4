//! Exact Gaussian process regression with a zero prior mean.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::blr::PredictiveDist;
use crate::error::{ensure_dim, ensure_finite, Error, Result};
use crate::numkit::{dot, Cholesky, Mat, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum KernelTerm {
    /// `a²·exp(−r²/(2l²))`.
    Rbf { amplitude: f64, length_scale: f64 },
    /// `a²(1 + √5r/l + 5r²/(3l²))·exp(−√5r/l)`.
    Matern52 { amplitude: f64, length_scale: f64 },
    /// `s` on exactly coincident inputs, 0 elsewhere.
    White { noise_level: f64 },
}

impl KernelTerm {
    fn eval(&self, x: &[f64], z: &[f64]) -> f64 {
        let r2: f64 = x.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
        match *self {
            KernelTerm::Rbf { amplitude, length_scale } => amplitude * amplitude * (-r2 / (2.0 * length_scale * length_scale)).exp(),
            KernelTerm::Matern52 { amplitude, length_scale } => {
                let s = 5f64.sqrt() * r2.sqrt() / length_scale;
                amplitude * amplitude * (1.0 + s + s * s / 3.0) * (-s).exp()
            }
            KernelTerm::White { noise_level } => {
                if x == z {
                    noise_level
                } else {
                    0.0
                }
            }
        }
    }

    fn params(&self) -> Vec<f64> {
        match *self {
            KernelTerm::Rbf { amplitude, length_scale } | KernelTerm::Matern52 { amplitude, length_scale } => vec![amplitude, length_scale],
            KernelTerm::White { noise_level } => vec![noise_level],
        }
    }
}

/// Sum of kernel terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub terms: Vec<KernelTerm>,
}

impl KernelSpec {
    pub fn new(terms: Vec<KernelTerm>) -> Result<Self> {
        let spec = Self { terms };
        spec.validate()?;
        Ok(spec)
    }

    pub fn rbf(amplitude: f64, length_scale: f64) -> Self {
        Self {
            terms: vec![KernelTerm::Rbf { amplitude, length_scale }],
        }
    }

    pub fn matern52(amplitude: f64, length_scale: f64) -> Self {
        Self {
            terms: vec![KernelTerm::Matern52 { amplitude, length_scale }],
        }
    }

    /// Append a term.
    pub fn plus(mut self, term: KernelTerm) -> Self {
        self.terms.push(term);
        self
    }

    /// Copy with every stationary term's lengthscale replaced.
    pub fn with_length_scale(&self, l: f64) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|t| match *t {
                KernelTerm::Rbf { amplitude, .. } => KernelTerm::Rbf { amplitude, length_scale: l },
                KernelTerm::Matern52 { amplitude, .. } => KernelTerm::Matern52 { amplitude, length_scale: l },
                w => w,
            })
            .collect();
        Self { terms }
    }

    pub fn validate(&self) -> Result<()> {
        if self.terms.is_empty() {
            return Err(Error::InvalidConfig("kernel needs at least one term".into()));
        }
        for t in &self.terms {
            if t.params().iter().any(|p| !(*p > 0.0) || !p.is_finite()) {
                return Err(Error::InvalidConfig(format!("kernel hyperparameters must be > 0: {t:?}")));
            }
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64], z: &[f64]) -> f64 {
        self.terms.iter().map(|t| t.eval(x, z)).sum()
    }
}

pub fn kernel_matrix(spec: &KernelSpec, x: &Mat, z: &Mat) -> Mat {
    assert_eq!(x.cols(), z.cols(), "kernel_matrix: input dimensions");
    Mat::from_fn(x.rows(), z.rows(), |i, j| spec.eval(x.row(i), z.row(j)))
}

#[derive(Debug, Clone)]
pub struct GpPosterior {
    x: Mat,
    y: Vec<f64>,
    spec: KernelSpec,
    noise_var: f64,
    chol: Cholesky,
    /// `(K + σ_n²I)⁻¹ y`.
    weights: Vec<f64>,
}

fn check_data(x: &Mat, y: &[f64], spec: &KernelSpec, noise_var: f64) -> Result<()> {
    spec.validate()?;
    ensure_dim("gp targets", x.rows(), y.len())?;
    if x.rows() == 0 {
        return Err(Error::EmptyInput("gp training inputs"));
    }
    if !(noise_var >= 0.0) || !noise_var.is_finite() {
        return Err(Error::InvalidConfig(format!("gp noise variance must be >= 0, got {noise_var}")));
    }
    ensure_finite(x.as_slice(), "gp inputs")?;
    ensure_finite(y, "gp targets")
}

pub fn gp_fit(x: &Mat, y: &[f64], spec: &KernelSpec, noise_var: f64) -> Result<GpPosterior> {
    check_data(x, y, spec, noise_var)?;
    let mut k = kernel_matrix(spec, x, x);
    k.add_diag(noise_var);
    let chol = Cholesky::factor(&k)?;
    let weights = chol.solve_vec(y);
    Ok(GpPosterior {
        x: x.clone(),
        y: y.to_vec(),
        spec: spec.clone(),
        noise_var,
        chol,
        weights,
    })
}

impl GpPosterior {
    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn inputs(&self) -> &Mat {
        &self.x
    }

    pub fn targets(&self) -> &[f64] {
        &self.y
    }

    /// Reconstruction of `K + σ_n²I` (plus any jitter the factorization needed).
    pub fn cov_reconstruction(&self) -> Mat {
        self.chol.reconstruct()
    }

    /// Mean `k*ᵀ(K+σ_n²I)⁻¹y`, epistemic `k(x,x) − k*ᵀ(K+σ_n²I)⁻¹k*`, total adds `σ_n²`.
    pub fn predict(&self, xq: &Mat) -> Result<PredictiveDist> {
        ensure_dim("gp query dimension", self.x.cols(), xq.cols())?;
        let ks = kernel_matrix(&self.spec, &self.x, xq);
        let v = self.chol.solve_lower_mat(&ks);
        let mean = ks.t_matvec(&self.weights);
        let epistemic = (0..xq.rows())
            .map(|j| {
                let q = xq.row(j);
                let reduction: f64 = (0..v.rows()).map(|i| v[(i, j)] * v[(i, j)]).sum();
                self.spec.eval(q, q) - reduction
            })
            .collect();
        Ok(PredictiveDist::from_epistemic(mean, epistemic, self.noise_var))
    }

    pub fn log_marginal(&self) -> f64 {
        let n = self.y.len() as f64;
        -0.5 * dot(&self.y, &self.weights) - 0.5 * self.chol.log_det() - 0.5 * n * (2.0 * PI).ln()
    }
}

pub fn gp_predict(post: &GpPosterior, xq: &Mat) -> Result<PredictiveDist> {
    post.predict(xq)
}

/// `−½yᵀ(K+σ_n²I)⁻¹y − ½log|K+σ_n²I| − (n/2)log 2π`.
pub fn gp_log_marginal(x: &Mat, y: &[f64], spec: &KernelSpec, noise_var: f64) -> Result<f64> {
    Ok(gp_fit(x, y, spec, noise_var)?.log_marginal())
}

/// `I × M` matrix whose columns are independent prior function draws on `grid`.
pub fn gp_prior_sample(spec: &KernelSpec, grid: &Mat, m: usize, stream: &mut RngStream) -> Result<Mat> {
    spec.validate()?;
    if grid.rows() == 0 || m == 0 {
        return Err(Error::EmptyInput("gp prior sample grid / count"));
    }
    let mut k = kernel_matrix(spec, grid, grid);
    // dense grids make K numerically singular; a tiny relative jitter keeps draws stable
    let mean_diag = k.diagonal().iter().sum::<f64>() / k.rows() as f64;
    k.add_diag(1e-10 * mean_diag);
    let chol = Cholesky::factor(&k)?;
    let z = Mat::from_vec(grid.rows(), m, stream.standard_normal(grid.rows() * m));
    Ok(chol.l().matmul(&z))
}

/// Candidate with the highest log evidence; ties go to the earliest candidate.
/// Candidates that fail to factor are skipped.
pub fn gp_grid_search(x: &Mat, y: &[f64], candidates: &[KernelSpec], noise_var: f64) -> Result<(KernelSpec, f64)> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput("gp grid-search candidates"));
    }
    let mut best: Option<(usize, f64)> = None;
    let mut last_err = None;
    for (i, spec) in candidates.iter().enumerate() {
        match gp_log_marginal(x, y, spec, noise_var) {
            Ok(ll) if ll.is_finite() => {
                if best.is_none_or(|(_, b)| ll > b) {
                    best = Some((i, ll));
                }
            }
            Ok(_) => last_err = Some(Error::NonFinite("gp log marginal")),
            Err(e) => last_err = Some(e),
        }
    }
    match best {
        Some((i, ll)) => Ok((candidates[i].clone(), ll)),
        None => Err(last_err.unwrap_or(Error::NonFinite("gp log marginal"))),
    }
}
