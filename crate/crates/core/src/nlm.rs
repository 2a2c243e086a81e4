//! Neural linear models: train the feature network (MLE, MAP or marginal
//! likelihood), then fit an analytic Bayesian head on its features.
//!
//! Objectives are stated as quantities to *maximize*. Training minimizes the
//! per-point loss `−objective/N`; on a minibatch of size `B` the data term is
//! rescaled by `N/B` so the estimate is unbiased.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::blr::{fit_blr, log_marginal, log_marginal_with_grad, BlrPosterior, PredictiveDist};
use crate::error::{ensure_dim, Error, Result};
use crate::net::{mlp_init, train, Activation, MlpParams, MlpSpec, Objective, OptimizerConfig, StepContext};
use crate::numkit::{Mat, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Mle,
    Map,
    Marginal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlmConfig {
    pub mlp: MlpSpec,
    /// Prior variance of the Bayesian head.
    pub alpha: f64,
    pub noise_var: f64,
    pub gamma: f64,
    pub optimizer: OptimizerConfig,
    pub mode: TrainMode,
}

impl NlmConfig {
    pub fn validate(&self) -> Result<()> {
        self.mlp.validate()?;
        self.optimizer.validate()?;
        if !(self.alpha > 0.0) || !(self.noise_var > 0.0) {
            return Err(Error::InvalidConfig("alpha and noise variance must be > 0".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::InvalidConfig("gamma must be >= 0".into()));
        }
        if self.mode == TrainMode::Mle && self.gamma != 0.0 {
            return Err(Error::InvalidConfig("MLE training has no regularizer; set gamma = 0 or use MAP".into()));
        }
        if self.mlp.hidden.is_empty() {
            return Err(Error::InvalidConfig("a neural linear model needs at least one hidden layer".into()));
        }
        Ok(())
    }
}

/// Gaussian log-likelihood of targets under a fixed-noise model.
pub(crate) fn gaussian_fit(out: &[f64], y: &[f64], noise_var: f64) -> f64 {
    let n = y.len() as f64;
    let sse: f64 = out.iter().zip(y).map(|(f, t)| (f - t).powi(2)).sum();
    -0.5 * n * (2.0 * PI * noise_var).ln() - sse / (2.0 * noise_var)
}

/// `log N(y; f_θ(X), σ²I) − γ‖θ_Full‖²`, the network's own head doing the fitting.
pub fn map_objective(params: &MlpParams, x: &Mat, y: &[f64], noise_var: f64, gamma: f64) -> Result<f64> {
    ensure_dim("map objective targets", x.rows(), y.len())?;
    let out = params.predict(x)?;
    Ok(gaussian_fit(&out, y, noise_var) - gamma * params.l2_norm_sq())
}

/// Log evidence of the Bayesian head on `Φ_θ(X)` minus `γ‖θ‖²` over the feature layers.
pub fn marginal_objective(params: &MlpParams, x: &Mat, y: &[f64], alpha: f64, noise_var: f64, gamma: f64) -> Result<f64> {
    ensure_dim("marginal objective targets", x.rows(), y.len())?;
    let penalty = gamma * params.feature_flat().iter().map(|v| v * v).sum::<f64>();
    let phi = params.features(x)?;
    Ok(log_marginal(&phi, y, alpha, noise_var)? - penalty)
}

/// Minibatch loss for MAP / MLE training.
pub struct MapLoss<'a> {
    pub spec: &'a MlpSpec,
    pub x: &'a Mat,
    pub y: &'a [f64],
    pub noise_var: f64,
    pub gamma: f64,
}

impl MapLoss<'_> {
    pub fn eval(&self, theta: &[f64], batch: &[usize], n_total: usize) -> Result<(f64, Vec<f64>)> {
        let params = MlpParams::from_flat(self.spec, theta);
        let xb = self.x.select_rows(batch);
        let yb: Vec<f64> = batch.iter().map(|&i| self.y[i]).collect();
        let b = batch.len().max(1) as f64;
        let n = n_total.max(1) as f64;
        let (out, cache) = params.forward(&xb)?;
        let fit = gaussian_fit(&out, &yb, self.noise_var);
        let reg: f64 = theta.iter().map(|t| t * t).sum();
        let loss = -fit / b + self.gamma * reg / n;
        let d_out: Vec<f64> = out.iter().zip(&yb).map(|(f, t)| (f - t) / (self.noise_var * b)).collect();
        let mut grad = params.backward(&cache, &d_out).to_flat();
        for (g, t) in grad.iter_mut().zip(theta) {
            *g += 2.0 * self.gamma * t / n;
        }
        Ok((loss, grad))
    }
}

impl Objective for MapLoss<'_> {
    fn loss_grad(&mut self, theta: &[f64], batch: &[usize], ctx: &StepContext, _s: &mut RngStream) -> Result<(f64, Vec<f64>)> {
        self.eval(theta, batch, ctx.n_total)
    }
}

/// Minibatch loss for marginal-likelihood training: `−log ev(batch)/B + γ‖θ‖²/N`.
pub struct MarginalLoss<'a> {
    pub spec: &'a MlpSpec,
    pub x: &'a Mat,
    pub y: &'a [f64],
    pub alpha: f64,
    pub noise_var: f64,
    pub gamma: f64,
}

impl MarginalLoss<'_> {
    pub fn eval(&self, theta: &[f64], batch: &[usize], n_total: usize) -> Result<(f64, Vec<f64>)> {
        let params = MlpParams::from_flat(self.spec, theta);
        let xb = self.x.select_rows(batch);
        let yb: Vec<f64> = batch.iter().map(|&i| self.y[i]).collect();
        let b = batch.len().max(1) as f64;
        let n = n_total.max(1) as f64;
        let (phi, cache) = params.features_with_cache(&xb)?;
        let (ev, d_phi) = log_marginal_with_grad(&phi, &yb, self.alpha, self.noise_var)?;
        let n_feat = self.spec.num_feature_params();
        let reg: f64 = theta[..n_feat].iter().map(|t| t * t).sum();
        let loss = -ev / b + self.gamma * reg / n;
        let (g, _) = params.backward_features(&cache, &d_phi.scale(-1.0 / b));
        let mut grad = g.to_flat();
        for (gi, t) in grad[..n_feat].iter_mut().zip(theta) {
            *gi += 2.0 * self.gamma * t / n;
        }
        Ok((loss, grad))
    }
}

impl Objective for MarginalLoss<'_> {
    fn loss_grad(&mut self, theta: &[f64], batch: &[usize], ctx: &StepContext, _s: &mut RngStream) -> Result<(f64, Vec<f64>)> {
        self.eval(theta, batch, ctx.n_total)
    }
}

#[derive(Debug, Clone)]
pub struct TrainedNet {
    pub params: MlpParams,
    pub loss_trace: Vec<f64>,
}

/// Initialize from `stream.split(0)` and train with `stream.split(1)`.
pub fn train_nlm(x: &Mat, y: &[f64], config: &NlmConfig, stream: &RngStream) -> Result<TrainedNet> {
    config.validate()?;
    ensure_dim("nlm targets", x.rows(), y.len())?;
    ensure_dim("nlm input dimension", config.mlp.input_dim, x.cols())?;
    let init = mlp_init(&config.mlp, &mut stream.split(0));
    let mut train_stream = stream.split(1);
    let out = match config.mode {
        TrainMode::Mle | TrainMode::Map => {
            let mut obj = MapLoss {
                spec: &config.mlp,
                x,
                y,
                noise_var: config.noise_var,
                gamma: config.gamma,
            };
            train(init.to_flat(), x.rows(), &mut obj, &config.optimizer, &mut train_stream)?
        }
        TrainMode::Marginal => {
            let mut obj = MarginalLoss {
                spec: &config.mlp,
                x,
                y,
                alpha: config.alpha,
                noise_var: config.noise_var,
                gamma: config.gamma,
            };
            train(init.to_flat(), x.rows(), &mut obj, &config.optimizer, &mut train_stream)?
        }
    };
    Ok(TrainedNet {
        params: MlpParams::from_flat(&config.mlp, &out.theta),
        loss_trace: out.loss_trace,
    })
}

/// Bayesian head on the learned features; the network's own head is ignored.
pub fn nlm_posterior(params: &MlpParams, x: &Mat, y: &[f64], alpha: f64, noise_var: f64) -> Result<BlrPosterior> {
    fit_blr(&params.features(x)?, y, alpha, noise_var)
}

/// Multiply the last feature layer by `c` and divide the head weights by `c`.
/// With positively homogeneous activations the network function is unchanged
/// while the features grow by `c`.
pub fn scale_last_layer(params: &MlpParams, c: f64) -> Result<MlpParams> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::InvalidConfig(format!("scale factor must be > 0, got {c}")));
    }
    if params.layers.len() < 2 {
        return Err(Error::InvalidConfig("scaling needs at least one hidden layer".into()));
    }
    if params.spec.activation == Activation::Tanh {
        return Err(Error::InvalidConfig("scaling cancels only for ReLU or linear features".into()));
    }
    let mut out = params.clone();
    let k = out.layers.len() - 2;
    out.layers[k].weights = out.layers[k].weights.scale(c);
    out.layers[k].bias.iter_mut().for_each(|b| *b *= c);
    let head = out.layers.last_mut().unwrap();
    head.weights = head.weights.scale(1.0 / c);
    Ok(out)
}

/// Feature network plus Bayesian head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralLinear {
    pub params: MlpParams,
    pub posterior: BlrPosterior,
}

impl NeuralLinear {
    pub fn fit(params: MlpParams, x: &Mat, y: &[f64], alpha: f64, noise_var: f64) -> Result<Self> {
        let posterior = nlm_posterior(&params, x, y, alpha, noise_var)?;
        Ok(Self { params, posterior })
    }

    pub fn predict(&self, x: &Mat) -> Result<PredictiveDist> {
        self.posterior.predict(&self.params.features(x)?)
    }
}
