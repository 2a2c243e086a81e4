//! Comparison models: deep ensembles (vanilla, bootstrap, anchored), MC
//! dropout, a regression SNGP with a Bayesian linear head on random Fourier
//! features, and an HMC-sampled Bayesian neural network.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blr::{fit_blr, BlrPosterior, PredictiveDist};
use crate::error::{ensure_dim, ensure_finite, Error, Result};
use crate::net::{mlp_init, mse_loss_grad, train, MlpParams, MlpSpec, MseObjective, Objective, OptimizerConfig, StepContext};
use crate::numkit::{norm2, Mat, RngStream};

// ---------------------------------------------------------------- ensembles

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EnsembleVariant {
    Vanilla,
    Bootstrap,
    Anchored {
        /// Variance of the member initializations.
        init_var: f64,
        /// Variance of the anchor draws.
        prior_var: f64,
        /// Data noise variance.
        noise_var: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub members: usize,
    pub variant: EnsembleVariant,
    /// L2 weight for vanilla and bootstrap members.
    #[serde(default)]
    pub gamma: f64,
    pub mlp: MlpSpec,
    pub optimizer: OptimizerConfig,
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        self.mlp.validate()?;
        self.optimizer.validate()?;
        if self.members < 2 {
            return Err(Error::InvalidConfig("an ensemble needs at least 2 members".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::InvalidConfig("gamma must be >= 0".into()));
        }
        if let EnsembleVariant::Anchored { init_var, prior_var, noise_var } = self.variant {
            if !(init_var > 0.0 && prior_var > 0.0 && noise_var > 0.0) {
                return Err(Error::InvalidConfig("anchored ensemble variances must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// Anchor regularization strength `σ_ε²/σ_prior²` (the diagonal of `Γ`).
pub fn anchored_gamma(noise_var: f64, prior_var: f64) -> f64 {
    noise_var / prior_var
}

/// `(1/B)‖y_B − ŷ_B‖² + (1/N)·Γ‖θ − θ_anc‖²`.
pub struct AnchoredLoss<'a> {
    pub spec: &'a MlpSpec,
    pub x: &'a Mat,
    pub y: &'a [f64],
    pub anchor: &'a [f64],
    pub gamma: f64,
}

impl AnchoredLoss<'_> {
    pub fn eval(&self, theta: &[f64], batch: &[usize], n_total: usize) -> Result<(f64, Vec<f64>)> {
        let params = MlpParams::from_flat(self.spec, theta);
        let xb = self.x.select_rows(batch);
        let yb: Vec<f64> = batch.iter().map(|&i| self.y[i]).collect();
        let (mse, grads) = mse_loss_grad(&params, &xb, &yb)?;
        let n = n_total.max(1) as f64;
        let mut g = grads.to_flat();
        let mut reg = 0.0;
        for ((gi, t), a) in g.iter_mut().zip(theta).zip(self.anchor) {
            let d = t - a;
            reg += d * d;
            *gi += 2.0 * self.gamma * d / n;
        }
        Ok((mse + self.gamma * reg / n, g))
    }
}

impl Objective for AnchoredLoss<'_> {
    fn loss_grad(&mut self, theta: &[f64], batch: &[usize], ctx: &StepContext, _s: &mut RngStream) -> Result<(f64, Vec<f64>)> {
        self.eval(theta, batch, ctx.n_total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub members: Vec<MlpParams>,
    /// Anchor draws, anchored variant only.
    pub anchors: Option<Vec<Vec<f64>>>,
}

/// Row indices of member `m`'s bootstrap resample.
pub fn bootstrap_indices(n: usize, stream: &mut RngStream) -> Vec<usize> {
    (0..n).map(|_| stream.below(n)).collect()
}

/// Members train in parallel; member `m` uses only `stream.split(m)`.
pub fn train_ensemble(x: &Mat, y: &[f64], config: &EnsembleConfig, stream: &RngStream) -> Result<Ensemble> {
    config.validate()?;
    ensure_dim("ensemble targets", x.rows(), y.len())?;
    ensure_dim("ensemble input dimension", config.mlp.input_dim, x.cols())?;
    ensure_finite(y, "ensemble targets")?;
    let trained: Vec<(MlpParams, Option<Vec<f64>>)> = (0..config.members)
        .into_par_iter()
        .map(|m| train_member(x, y, config, &stream.split(m as u64)))
        .collect::<Result<_>>()?;
    let anchored = matches!(config.variant, EnsembleVariant::Anchored { .. });
    let (members, anchors): (Vec<_>, Vec<_>) = trained.into_iter().unzip();
    Ok(Ensemble {
        members,
        anchors: anchored.then(|| anchors.into_iter().map(Option::unwrap).collect()),
    })
}

fn train_member(x: &Mat, y: &[f64], config: &EnsembleConfig, stream: &RngStream) -> Result<(MlpParams, Option<Vec<f64>>)> {
    let spec = &config.mlp;
    let mut train_stream = stream.split(3);
    match config.variant {
        EnsembleVariant::Vanilla | EnsembleVariant::Bootstrap => {
            let (xm, ym) = if config.variant == EnsembleVariant::Bootstrap {
                let idx = bootstrap_indices(x.rows(), &mut stream.split(2));
                (x.select_rows(&idx), idx.iter().map(|&i| y[i]).collect())
            } else {
                (x.clone(), y.to_vec())
            };
            let init = mlp_init(spec, &mut stream.split(0));
            let mut obj = MseObjective {
                spec,
                x: &xm,
                y: &ym,
                gamma: config.gamma,
            };
            let out = train(init.to_flat(), xm.rows(), &mut obj, &config.optimizer, &mut train_stream)?;
            Ok((MlpParams::from_flat(spec, &out.theta), None))
        }
        EnsembleVariant::Anchored { init_var, prior_var, noise_var } => {
            let init = MlpParams::gaussian(spec, init_var.sqrt(), &mut stream.split(0));
            let anchor = MlpParams::gaussian(spec, prior_var.sqrt(), &mut stream.split(1)).to_flat();
            let mut obj = AnchoredLoss {
                spec,
                x,
                y,
                anchor: &anchor,
                gamma: anchored_gamma(noise_var, prior_var),
            };
            let out = train(init.to_flat(), x.rows(), &mut obj, &config.optimizer, &mut train_stream)?;
            Ok((MlpParams::from_flat(spec, &out.theta), Some(anchor)))
        }
    }
}

/// Mean and population variance across per-member predictions
/// (`preds[m][i]`). No noise term is added.
pub fn moments_across(preds: &[Vec<f64>]) -> PredictiveDist {
    let m = preds.len() as f64;
    let n = preds[0].len();
    let mut mean = vec![0.0; n];
    for p in preds {
        for (a, v) in mean.iter_mut().zip(p) {
            *a += v / m;
        }
    }
    let mut var = vec![0.0; n];
    for p in preds {
        for ((s, v), mu) in var.iter_mut().zip(p).zip(&mean) {
            *s += (v - mu) * (v - mu) / m;
        }
    }
    PredictiveDist::from_epistemic(mean, var, 0.0)
}

pub fn ensemble_predict(members: &[MlpParams], x: &Mat) -> Result<PredictiveDist> {
    if members.len() < 2 {
        return Err(Error::InvalidConfig("ensemble prediction needs at least 2 members".into()));
    }
    let preds: Vec<Vec<f64>> = members.iter().map(|p| p.predict(x)).collect::<Result<_>>()?;
    Ok(moments_across(&preds))
}

// ---------------------------------------------------------------- MC dropout

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McdConfig {
    /// Drop probability `p`.
    pub dropout: f64,
    /// Stochastic forward passes at prediction time.
    pub passes: usize,
    #[serde(default)]
    pub gamma: f64,
    pub mlp: MlpSpec,
    pub optimizer: OptimizerConfig,
}

impl McdConfig {
    pub fn validate(&self) -> Result<()> {
        self.mlp.validate()?;
        self.optimizer.validate()?;
        if !(self.dropout > 0.0 && self.dropout < 1.0) {
            return Err(Error::InvalidConfig("dropout rate must lie in (0, 1)".into()));
        }
        if self.passes < 2 {
            return Err(Error::InvalidConfig("need at least 2 dropout passes".into()));
        }
        if self.mlp.hidden.is_empty() {
            return Err(Error::InvalidConfig("dropout needs at least one hidden layer".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::InvalidConfig("gamma must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McdModel {
    pub params: MlpParams,
    pub dropout: f64,
    pub passes: usize,
}

/// Inverted-dropout masks for `rows` inputs: each entry is `0` with
/// probability `p`, else `1/(1−p)`.
pub fn dropout_masks(spec: &MlpSpec, rows: usize, p: f64, stream: &mut RngStream) -> Vec<Mat> {
    let keep = 1.0 / (1.0 - p);
    spec.hidden
        .iter()
        .map(|&h| Mat::from_fn(rows, h, |_, _| if stream.bernoulli(1.0 - p) { keep } else { 0.0 }))
        .collect()
}

struct DropoutMse<'a> {
    spec: &'a MlpSpec,
    x: &'a Mat,
    y: &'a [f64],
    p: f64,
    gamma: f64,
}

impl Objective for DropoutMse<'_> {
    fn loss_grad(&mut self, theta: &[f64], batch: &[usize], _ctx: &StepContext, stream: &mut RngStream) -> Result<(f64, Vec<f64>)> {
        let params = MlpParams::from_flat(self.spec, theta);
        let xb = self.x.select_rows(batch);
        let masks = dropout_masks(self.spec, batch.len(), self.p, stream);
        let (out, cache) = params.forward_masked(&xb, &masks)?;
        let n = batch.len().max(1) as f64;
        let resid: Vec<f64> = out.iter().zip(batch).map(|(f, &i)| f - self.y[i]).collect();
        let d_out: Vec<f64> = resid.iter().map(|r| 2.0 * r / n).collect();
        let mut g = params.backward(&cache, &d_out).to_flat();
        let mut reg = 0.0;
        for (gi, t) in g.iter_mut().zip(theta) {
            reg += t * t;
            *gi += 2.0 * self.gamma * t;
        }
        Ok((resid.iter().map(|r| r * r).sum::<f64>() / n + self.gamma * reg, g))
    }
}

pub fn mcd_train(x: &Mat, y: &[f64], config: &McdConfig, stream: &RngStream) -> Result<McdModel> {
    config.validate()?;
    ensure_dim("dropout targets", x.rows(), y.len())?;
    ensure_dim("dropout input dimension", config.mlp.input_dim, x.cols())?;
    let init = mlp_init(&config.mlp, &mut stream.split(0));
    let mut obj = DropoutMse {
        spec: &config.mlp,
        x,
        y,
        p: config.dropout,
        gamma: config.gamma,
    };
    let out = train(init.to_flat(), x.rows(), &mut obj, &config.optimizer, &mut stream.split(1))?;
    Ok(McdModel {
        params: MlpParams::from_flat(&config.mlp, &out.theta),
        dropout: config.dropout,
        passes: config.passes,
    })
}

/// `T` masked passes; mean and population variance of the outputs, plus `noise_var`.
pub fn mcd_predict(model: &McdModel, x: &Mat, noise_var: f64, stream: &mut RngStream) -> Result<PredictiveDist> {
    let preds: Vec<Vec<f64>> = (0..model.passes)
        .map(|_| {
            let masks = dropout_masks(&model.params.spec, x.rows(), model.dropout, stream);
            model.params.forward_masked(x, &masks).map(|(out, _)| out)
        })
        .collect::<Result<_>>()?;
    let d = moments_across(&preds);
    Ok(PredictiveDist::from_epistemic(d.mean, d.epistemic_var, noise_var))
}

// ---------------------------------------------------------------- SNGP

/// Largest singular value by power iteration on `WᵀW`, starting from `v`.
/// Returns the estimate and the final right vector.
pub fn power_iteration(w: &Mat, iters: usize, mut v: Vec<f64>) -> (f64, Vec<f64>) {
    let mut sigma = 0.0;
    for _ in 0..iters.max(1) {
        let nv = norm2(&v);
        if nv == 0.0 {
            return (0.0, v);
        }
        v.iter_mut().for_each(|x| *x /= nv);
        let u = w.matvec(&v);
        sigma = norm2(&u);
        v = w.t_matvec(&u);
    }
    let nv = norm2(&v);
    if nv > 0.0 {
        v.iter_mut().for_each(|x| *x /= nv);
    }
    (sigma, v)
}

/// Rescale `W` to spectral norm `c` when its estimated norm exceeds `c`.
pub fn spectral_normalize(w: &Mat, c: f64, iters: usize, stream: &mut RngStream) -> Mat {
    let v0 = stream.standard_normal(w.cols());
    normalize_from(w, c, iters, v0).0
}

fn normalize_from(w: &Mat, c: f64, iters: usize, v0: Vec<f64>) -> (Mat, Vec<f64>) {
    let (sigma, v) = power_iteration(w, iters, v0);
    if sigma > c {
        (w.scale(c / sigma), v)
    } else {
        (w.clone(), v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SngpConfig {
    /// Spectral norm bound `c`.
    pub norm_bound: f64,
    pub power_iters: usize,
    /// Random Fourier feature count `D_L`.
    pub rff_dim: usize,
    /// RBF lengthscale targeted by the random features.
    #[serde(default = "one")]
    pub length_scale: f64,
    pub alpha: f64,
    pub noise_var: f64,
    #[serde(default)]
    pub gamma: f64,
    pub mlp: MlpSpec,
    pub optimizer: OptimizerConfig,
}

fn one() -> f64 {
    1.0
}

impl SngpConfig {
    pub fn validate(&self) -> Result<()> {
        self.mlp.validate()?;
        self.optimizer.validate()?;
        if self.mlp.hidden.is_empty() {
            return Err(Error::InvalidConfig("SNGP body needs at least one hidden layer".into()));
        }
        if !(self.norm_bound > 0.0) || self.power_iters == 0 || self.rff_dim == 0 {
            return Err(Error::InvalidConfig("need norm bound > 0, power iterations >= 1, rff dim >= 1".into()));
        }
        if !(self.length_scale > 0.0 && self.alpha > 0.0 && self.noise_var > 0.0 && self.gamma >= 0.0) {
            return Err(Error::InvalidConfig("need lengthscale, alpha, noise variance > 0 and gamma >= 0".into()));
        }
        Ok(())
    }
}

/// Fixed random Fourier feature map `√(2/D_L)·cos(W_L h / ℓ + b_L)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RffLayer {
    /// `D_L × H`, entries `N(0, 1)`.
    pub weights: Mat,
    /// Entries `U(0, 2π)`.
    pub bias: Vec<f64>,
    pub length_scale: f64,
}

impl RffLayer {
    pub fn draw(input_dim: usize, rff_dim: usize, length_scale: f64, stream: &mut RngStream) -> Self {
        let weights = Mat::from_vec(rff_dim, input_dim, stream.standard_normal(rff_dim * input_dim));
        let bias = stream.uniform(0.0, 2.0 * PI, rff_dim);
        Self {
            weights,
            bias,
            length_scale,
        }
    }

    pub fn features(&self, h: &Mat) -> Mat {
        let d = self.bias.len();
        let scale = (2.0 / d as f64).sqrt();
        let z = h.matmul_t(&self.weights);
        Mat::from_fn(h.rows(), d, |i, j| scale * (z[(i, j)] / self.length_scale + self.bias[j]).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SngpModel {
    /// Spectrally normalized body; its output layer is only used in training.
    pub body: MlpParams,
    pub rff: RffLayer,
    pub posterior: BlrPosterior,
}

impl SngpModel {
    pub fn features(&self, x: &Mat) -> Result<Mat> {
        let (_, cache) = self.body.forward(x)?;
        Ok(self.rff.features(cache.last_hidden()))
    }

    pub fn predict(&self, x: &Mat) -> Result<PredictiveDist> {
        self.posterior.predict(&self.features(x)?)
    }
}

struct SpectralMse<'a> {
    inner: MseObjective<'a>,
    spec: &'a MlpSpec,
    bound: f64,
    iters: usize,
    vectors: Vec<Vec<f64>>,
}

impl Objective for SpectralMse<'_> {
    fn loss_grad(&mut self, theta: &[f64], batch: &[usize], ctx: &StepContext, stream: &mut RngStream) -> Result<(f64, Vec<f64>)> {
        self.inner.loss_grad(theta, batch, ctx, stream)
    }

    fn after_step(&mut self, theta: &mut [f64]) {
        let mut params = MlpParams::from_flat(self.spec, theta);
        let n_body = params.layers.len() - 1;
        for (layer, v) in params.layers[..n_body].iter_mut().zip(self.vectors.iter_mut()) {
            let (w, nv) = normalize_from(&layer.weights, self.bound, self.iters, std::mem::take(v));
            layer.weights = w;
            *v = nv;
        }
        theta.copy_from_slice(&params.to_flat());
    }
}

/// Body trained on MSE with every hidden layer projected to spectral norm
/// `≤ c` after each step; RFF layer drawn once; BLR head on the RFF features.
pub fn train_sngp(x: &Mat, y: &[f64], config: &SngpConfig, stream: &RngStream) -> Result<SngpModel> {
    config.validate()?;
    ensure_dim("sngp targets", x.rows(), y.len())?;
    ensure_dim("sngp input dimension", config.mlp.input_dim, x.cols())?;
    let spec = &config.mlp;
    let init = mlp_init(spec, &mut stream.split(0));
    let mut vec_stream = stream.split(2);
    let vectors = spec.layer_shapes()[..spec.hidden.len()]
        .iter()
        .map(|&(_, i)| vec_stream.standard_normal(i))
        .collect();
    let mut obj = SpectralMse {
        inner: MseObjective {
            spec,
            x,
            y,
            gamma: config.gamma,
        },
        spec,
        bound: config.norm_bound,
        iters: config.power_iters,
        vectors,
    };
    let mut theta = init.to_flat();
    obj.after_step(&mut theta);
    let out = train(theta, x.rows(), &mut obj, &config.optimizer, &mut stream.split(1))?;
    let body = MlpParams::from_flat(spec, &out.theta);
    let rff = RffLayer::draw(spec.feature_dim() - 1, config.rff_dim, config.length_scale, &mut stream.split(3));
    let (_, cache) = body.forward(x)?;
    let posterior = fit_blr(&rff.features(cache.last_hidden()), y, config.alpha, config.noise_var)?;
    Ok(SngpModel { body, rff, posterior })
}

// ---------------------------------------------------------------- HMC

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HmcConfig {
    pub step_size: f64,
    pub leapfrog_steps: usize,
    pub iterations: usize,
    #[serde(default)]
    pub burn_in: usize,
    #[serde(default = "one_usize")]
    pub thinning: usize,
    /// Scalar mass; momenta are `N(0, mass·I)`.
    #[serde(default = "one")]
    pub mass: f64,
    pub prior_sd: f64,
    pub noise_sd: f64,
}

fn one_usize() -> usize {
    1
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || self.leapfrog_steps == 0 {
            return Err(Error::InvalidConfig("need step size > 0 and at least one leapfrog step".into()));
        }
        if self.thinning == 0 || self.burn_in >= self.iterations {
            return Err(Error::InvalidConfig("need thinning >= 1 and burn-in < iterations".into()));
        }
        if !(self.mass > 0.0 && self.prior_sd > 0.0 && self.noise_sd > 0.0) {
            return Err(Error::InvalidConfig("mass, prior sd and noise sd must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmcTrace {
    /// One position per iteration (the current one again after a rejection).
    pub samples: Vec<Vec<f64>>,
    pub accepted: usize,
    /// Proposals rejected because an energy was not finite.
    pub non_finite: usize,
}

impl HmcTrace {
    pub fn acceptance_rate(&self) -> f64 {
        self.accepted as f64 / self.samples.len().max(1) as f64
    }

    /// Samples after burn-in, every `thinning`-th.
    pub fn kept(&self, burn_in: usize, thinning: usize) -> impl Iterator<Item = &Vec<f64>> {
        self.samples.iter().skip(burn_in).step_by(thinning.max(1))
    }
}

/// One leapfrog trajectory: half momentum step, then alternating full
/// position and momentum steps, ending with a half momentum step.
pub fn leapfrog<F>(potential: &mut F, q: &[f64], p: &[f64], step: f64, steps: usize, mass: f64) -> (Vec<f64>, Vec<f64>)
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut q = q.to_vec();
    let mut p = p.to_vec();
    let (_, g) = potential(&q);
    p.iter_mut().zip(&g).for_each(|(pi, gi)| *pi -= 0.5 * step * gi);
    for s in 0..steps {
        q.iter_mut().zip(&p).for_each(|(qi, pi)| *qi += step * pi / mass);
        let (_, g) = potential(&q);
        let f = if s + 1 == steps { 0.5 } else { 1.0 };
        p.iter_mut().zip(&g).for_each(|(pi, gi)| *pi -= f * step * gi);
    }
    p.iter_mut().for_each(|pi| *pi = -*pi);
    (q, p)
}

fn kinetic(p: &[f64], mass: f64) -> f64 {
    p.iter().map(|v| v * v).sum::<f64>() / (2.0 * mass)
}

/// Metropolis-corrected HMC. `potential` returns `U(q)` and `∇U(q)`.
pub fn hmc_sample<F>(mut potential: F, config: &HmcConfig, q0: &[f64], stream: &mut RngStream) -> Result<HmcTrace>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    config.validate()?;
    let mut q = q0.to_vec();
    let mut u_cur = potential(&q).0;
    if !u_cur.is_finite() {
        return Err(Error::NonFinite("HMC starting energy"));
    }
    let sd = config.mass.sqrt();
    let mut trace = HmcTrace {
        samples: Vec::with_capacity(config.iterations),
        accepted: 0,
        non_finite: 0,
    };
    for _ in 0..config.iterations {
        let p: Vec<f64> = stream.standard_normal(q.len()).into_iter().map(|z| z * sd).collect();
        let (q_new, p_new) = leapfrog(&mut potential, &q, &p, config.step_size, config.leapfrog_steps, config.mass);
        let u_new = potential(&q_new).0;
        let log_ratio = u_cur - u_new + kinetic(&p, config.mass) - kinetic(&p_new, config.mass);
        let draw = stream.next_uniform();
        if !log_ratio.is_finite() || !u_new.is_finite() {
            trace.non_finite += 1;
        } else if draw < log_ratio.exp() {
            q = q_new;
            u_cur = u_new;
            trace.accepted += 1;
        }
        trace.samples.push(q.clone());
    }
    Ok(trace)
}

/// `U(θ) = ‖θ‖²/(2σ_θ²) + ‖y − f_θ(X)‖²/(2σ_y²)` and its gradient.
pub fn bnn_potential(spec: &MlpSpec, x: &Mat, y: &[f64], prior_sd: f64, noise_sd: f64, theta: &[f64]) -> (f64, Vec<f64>) {
    let pv = prior_sd * prior_sd;
    let nv = noise_sd * noise_sd;
    let mut u: f64 = theta.iter().map(|t| t * t).sum::<f64>() / (2.0 * pv);
    let mut g: Vec<f64> = theta.iter().map(|t| t / pv).collect();
    if x.rows() > 0 {
        let params = MlpParams::from_flat(spec, theta);
        let Ok((out, cache)) = params.forward(x) else {
            return (f64::NAN, g);
        };
        let resid: Vec<f64> = out.iter().zip(y).map(|(f, t)| f - t).collect();
        u += resid.iter().map(|r| r * r).sum::<f64>() / (2.0 * nv);
        let d_out: Vec<f64> = resid.iter().map(|r| r / nv).collect();
        for (gi, d) in g.iter_mut().zip(params.backward(&cache, &d_out).to_flat()) {
            *gi += d;
        }
    }
    (u, g)
}

/// Sample network weights with HMC and summarize outputs on `xq` over the
/// kept samples. Starts from `mlp_init` on `stream.split(0)`; sampling uses `split(1)`.
pub fn bnn_hmc_sample(spec: &MlpSpec, x: &Mat, y: &[f64], config: &HmcConfig, stream: &RngStream) -> Result<HmcTrace> {
    spec.validate()?;
    ensure_dim("bnn targets", x.rows(), y.len())?;
    if x.rows() > 0 {
        ensure_dim("bnn input dimension", spec.input_dim, x.cols())?;
    }
    let q0 = mlp_init(spec, &mut stream.split(0)).to_flat();
    hmc_sample(
        |q| bnn_potential(spec, x, y, config.prior_sd, config.noise_sd, q),
        config,
        &q0,
        &mut stream.split(1),
    )
}

pub fn bnn_hmc_predict(spec: &MlpSpec, x: &Mat, y: &[f64], config: &HmcConfig, stream: &RngStream, xq: &Mat) -> Result<PredictiveDist> {
    let trace = bnn_hmc_sample(spec, x, y, config, stream)?;
    bnn_predict_from_trace(spec, &trace, config, xq)
}

pub fn bnn_predict_from_trace(spec: &MlpSpec, trace: &HmcTrace, config: &HmcConfig, xq: &Mat) -> Result<PredictiveDist> {
    let preds: Vec<Vec<f64>> = trace
        .kept(config.burn_in, config.thinning)
        .map(|q| MlpParams::from_flat(spec, q).predict(xq))
        .collect::<Result<_>>()?;
    if preds.is_empty() {
        return Err(Error::EmptyInput("HMC samples after burn-in"));
    }
    let d = moments_across(&preds);
    Ok(PredictiveDist::from_epistemic(d.mean, d.epistemic_var, config.noise_sd * config.noise_sd))
}
