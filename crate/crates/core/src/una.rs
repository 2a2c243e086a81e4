//! Uncertainty-aware feature learning: a shared feature network is trained
//! together with `M` auxiliary linear heads, which are then discarded and
//! replaced by a Bayesian head.
//!
//! * LUNA fits every head to the data while penalizing the squared cosine
//!   similarity between the heads' input gradients, estimated by forward
//!   finite differences along random per-coordinate perturbations.
//! * TUNA fits each head to one reference function (for example a GP prior
//!   draw) on a set of reference inputs.
//!
//! Parameters are optimized as one flat vector: the feature layers of the
//! network followed by the `M × (L+1)` head matrix, row-major.

use serde::{Deserialize, Serialize};

use crate::blr::BlrPosterior;
use crate::error::{ensure_dim, ensure_finite, Error, Result};
use crate::gp::{gp_prior_sample, KernelSpec};
use crate::net::{mlp_init, train, Activation, ForwardCache, MlpParams, MlpSpec, Objective, OptimizerConfig, StepContext};
use crate::nlm::{gaussian_fit, NeuralLinear};
use crate::numkit::{dot, percentile, Mat, RngStream};

/// Norm below which an input gradient counts as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;
const MAX_REDRAWS: usize = 64;

/// Squared cosine similarity, or [`Error::DegenerateGradient`] when either norm is tiny.
pub fn cos_sim_sq(g: &[f64], h: &[f64]) -> Result<f64> {
    assert_eq!(g.len(), h.len(), "cos_sim_sq: lengths");
    let gg = dot(g, g);
    let hh = dot(h, h);
    if gg.sqrt() <= DEGENERATE_NORM || hh.sqrt() <= DEGENERATE_NORM {
        return Err(Error::DegenerateGradient);
    }
    let gh = dot(g, h);
    Ok((gh * gh / (gg * hh)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnealKind {
    /// The weight is `scale` at every epoch.
    Constant,
    Sqrt,
    Sigmoid,
    Tanh,
}

/// Epoch-dependent diversity weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealSchedule {
    pub kind: AnnealKind,
    /// Multiplier `C` of the shaped schedules.
    pub scale: f64,
    /// Horizon `N` in epochs.
    pub epochs: usize,
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= 0.0) {
            return Err(Error::InvalidConfig("anneal scale must be >= 0".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("anneal horizon must be >= 1 epoch".into()));
        }
        Ok(())
    }
}

/// Diversity weight at epoch `x`.
pub fn anneal(schedule: &AnnealSchedule, x: f64) -> f64 {
    let c = schedule.scale;
    let t = x / schedule.epochs as f64;
    match schedule.kind {
        AnnealKind::Constant => c,
        AnnealKind::Sqrt => c * t.max(0.0).sqrt(),
        AnnealKind::Sigmoid => c / (1.0 + (-6.0 * t + 3.0).exp()),
        AnnealKind::Tanh => c * ((6.0 * t - 3.0).tanh() + 1.0) / 2.0,
    }
}

/// Per-coordinate perturbations `δ ~ N(0, sd²)`, redrawn while `|δ| < 1e-12`.
pub fn draw_perturbations(rows: usize, dim: usize, sd: f64, stream: &mut RngStream) -> Mat {
    Mat::from_fn(rows, dim, |_, _| {
        for _ in 0..MAX_REDRAWS {
            let d = sd * stream.next_normal();
            if d.abs() >= 1e-12 {
                return d;
            }
        }
        sd.max(1e-12)
    })
}

/// `[X; X + δ_{·,1}e₁; …; X + δ_{·,D}e_D]`.
fn stacked_inputs(x: &Mat, deltas: &Mat) -> Mat {
    let (b, d) = x.shape();
    let mut out = x.clone();
    for k in 0..d {
        let shifted = Mat::from_fn(b, d, |i, j| if j == k { x[(i, j)] + deltas[(i, k)] } else { x[(i, j)] });
        out = out.vstack(&shifted);
    }
    out
}

/// How finite-difference gradients are grouped before taking cosine similarities.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiversityPooling {
    /// One `D`-vector per input point; `CosSim²` averaged over the points.
    #[default]
    PerPoint,
    /// One `B·D`-vector per head holding the gradients at every point. Needed
    /// for `D = 1`, where per-point `CosSim²` is identically 1.
    Batch,
}

impl DiversityPooling {
    fn groups(self, b: usize) -> Vec<Vec<usize>> {
        match self {
            Self::PerPoint => (0..b).map(|i| vec![i]).collect(),
            Self::Batch => vec![(0..b).collect()],
        }
    }
}

/// Finite-difference feature differences for the points in `group`: row
/// `(g, k)` is `(Φ(x_i + δ_{i,k}e_k) − Φ(x_i))/δ_{i,k}` for `i = group[g]`.
fn feature_differences(phi_stack: &Mat, deltas: &Mat, group: &[usize]) -> Mat {
    let (b, d) = deltas.shape();
    let cols = phi_stack.cols();
    Mat::from_fn(group.len() * d, cols, |r, j| {
        let (i, k) = (group[r / d], r % d);
        let row = (k + 1) * b + i;
        (phi_stack[(row, j)] - phi_stack[(i, j)]) / deltas[(i, k)]
    })
}

/// Finite-difference input gradients of every head at `x`: an `M × D` matrix.
pub fn fd_gradients(params: &MlpParams, heads: &Mat, x: &[f64], perturb_sd: f64, stream: &mut RngStream) -> Result<Mat> {
    if !(perturb_sd > 0.0) {
        return Err(Error::InvalidConfig("perturbation sd must be > 0".into()));
    }
    let xm = Mat::from_vec(1, x.len(), x.to_vec());
    let deltas = draw_perturbations(1, x.len(), perturb_sd, stream);
    let phi = params.features(&stacked_inputs(&xm, &deltas))?;
    ensure_dim("head width", phi.cols(), heads.cols())?;
    Ok(heads.matmul_t(&feature_differences(&phi, &deltas, &[0])))
}

/// Sum over pairs of `CosSim²` and its gradient with respect to the `D × M`
/// gradient matrix `g`. Degenerate columns contribute nothing.
fn pair_penalty(g: &Mat) -> (f64, Mat) {
    let m = g.cols();
    let q = g.t_matmul(g);
    let ok: Vec<bool> = (0..m).map(|i| q[(i, i)].sqrt() > DEGENERATE_NORM).collect();
    let mut value = 0.0;
    let mut gamma = Mat::zeros(m, m);
    for i in 0..m {
        for j in (i + 1)..m {
            if !(ok[i] && ok[j]) {
                continue;
            }
            let (a, c, s) = (q[(i, i)], q[(j, j)], q[(i, j)]);
            value += s * s / (a * c);
            let cross = 2.0 * s / (a * c);
            gamma[(j, i)] += cross;
            gamma[(i, j)] += cross;
            gamma[(i, i)] -= 2.0 * s * s / (a * a * c);
            gamma[(j, j)] -= 2.0 * s * s / (a * c * c);
        }
    }
    (value, g.matmul(&gamma))
}

/// `Σ_{i<j}` `CosSim²` of the heads' finite-difference input gradients, averaged
/// over the pooling groups; divided by `M(M−1)/2` when `normalized`.
pub fn diversity_penalty(
    params: &MlpParams,
    heads: &Mat,
    x: &Mat,
    perturb_sd: f64,
    pooling: DiversityPooling,
    stream: &mut RngStream,
    normalized: bool,
) -> Result<f64> {
    let m = heads.rows();
    if m < 2 || x.rows() == 0 {
        return Ok(0.0);
    }
    if !(perturb_sd > 0.0) {
        return Err(Error::InvalidConfig("perturbation sd must be > 0".into()));
    }
    let deltas = draw_perturbations(x.rows(), x.cols(), perturb_sd, stream);
    let phi = params.features(&stacked_inputs(x, &deltas))?;
    ensure_dim("head width", phi.cols(), heads.cols())?;
    let groups = pooling.groups(x.rows());
    let total: f64 = groups
        .iter()
        .map(|group| pair_penalty(&feature_differences(&phi, &deltas, group).matmul_t(heads)).0)
        .sum();
    let mean = total / groups.len() as f64;
    Ok(if normalized { mean / pair_count(m) } else { mean })
}

fn pair_count(m: usize) -> f64 {
    (m * (m - 1)) as f64 / 2.0
}

/// `(1/M) Σ_m log N(y; Φ_θ w̃_m, σ²I) − γ‖Ψ‖²` with `Ψ` = feature layers and all heads.
pub fn fit_term(params: &MlpParams, heads: &Mat, x: &Mat, y: &[f64], noise_var: f64, gamma: f64) -> Result<f64> {
    ensure_dim("fit targets", x.rows(), y.len())?;
    let phi = params.features(x)?;
    ensure_dim("head width", phi.cols(), heads.cols())?;
    let m = heads.rows();
    let outputs = phi.matmul_t(heads);
    let fit: f64 = (0..m).map(|k| gaussian_fit(&outputs.col(k), y, noise_var)).sum::<f64>() / m as f64;
    let reg = params.feature_flat().iter().chain(heads.as_slice()).map(|v| v * v).sum::<f64>();
    Ok(fit - gamma * reg)
}

/// Network init plus `M` heads; head 0 is the network's own output layer, the
/// rest follow the same initializer.
pub fn init_with_heads(spec: &MlpSpec, n_heads: usize, stream: &RngStream) -> (MlpParams, Mat) {
    let params = mlp_init(spec, &mut stream.split(0));
    let width = spec.feature_dim();
    let gain = if spec.activation == Activation::Relu { 2.0 } else { 1.0 };
    let sd = (gain / (width - 1) as f64).sqrt();
    let mut head_stream = stream.split(2);
    let mut heads = Mat::zeros(n_heads, width);
    for m in 0..n_heads {
        let row = if m == 0 {
            params.head()
        } else {
            let mut w: Vec<f64> = head_stream.standard_normal(width - 1).into_iter().map(|z| z * sd).collect();
            w.push(0.0);
            w
        };
        heads.row_mut(m).copy_from_slice(&row);
    }
    (params, heads)
}

/// Flat `[feature params, heads]` vector, the parameter layout of `LunaLoss` and `TunaLoss`.
pub fn pack(params: &MlpParams, heads: &Mat) -> Vec<f64> {
    let mut flat = params.feature_flat();
    flat.extend_from_slice(heads.as_slice());
    flat
}

pub fn unpack(template: &MlpParams, n_heads: usize, theta: &[f64]) -> (MlpParams, Mat) {
    let n_feat = template.spec.num_feature_params();
    let params = template.with_feature_flat(&theta[..n_feat]);
    let heads = Mat::from_vec(n_heads, template.spec.feature_dim(), theta[n_feat..].to_vec());
    (params, heads)
}

/// Head-0 network: feature layers from `params`, output layer from `heads` row 0.
fn with_head(params: &MlpParams, heads: &Mat) -> MlpParams {
    let mut out = params.clone();
    let last = out.layers.last_mut().unwrap();
    let row = heads.row(0);
    let l = row.len() - 1;
    last.weights = Mat::from_vec(1, l, row[..l].to_vec());
    last.bias = vec![row[l]];
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LunaConfig {
    pub mlp: MlpSpec,
    pub heads: usize,
    pub gamma: f64,
    pub alpha: f64,
    pub noise_var: f64,
    pub perturb_sd: f64,
    #[serde(default)]
    pub pooling: DiversityPooling,
    pub schedule: AnnealSchedule,
    pub optimizer: OptimizerConfig,
}

impl LunaConfig {
    pub fn validate(&self) -> Result<()> {
        self.mlp.validate()?;
        self.optimizer.validate()?;
        self.schedule.validate()?;
        if self.mlp.hidden.is_empty() {
            return Err(Error::InvalidConfig("feature network needs at least one hidden layer".into()));
        }
        if self.heads == 0 {
            return Err(Error::InvalidConfig("need at least one auxiliary head".into()));
        }
        if !(self.perturb_sd > 0.0) {
            return Err(Error::InvalidConfig("perturbation sd must be > 0".into()));
        }
        if !(self.gamma >= 0.0) || !(self.alpha > 0.0) || !(self.noise_var > 0.0) {
            return Err(Error::InvalidConfig("need gamma >= 0, alpha > 0, noise variance > 0".into()));
        }
        Ok(())
    }
}

/// Per-epoch means of the fit term (per point), normalized diversity and weight.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LunaTrace {
    pub fit: Vec<f64>,
    pub diversity: Vec<f64>,
    pub weight: Vec<f64>,
}

/// Minibatch LUNA loss in per-point units:
/// `−fit_B/B + w·div_B + γ‖Ψ‖²/N`, where `div_B` is the pair- and batch-averaged
/// `CosSim²` and `w` the annealed weight. With the batch-size factor
/// `2B/(M(M−1))` folded in, this is the raw pair sum scaled as prescribed.
pub struct LunaLoss<'a> {
    pub template: &'a MlpParams,
    pub n_heads: usize,
    pub x: &'a Mat,
    pub y: &'a [f64],
    pub noise_var: f64,
    pub gamma: f64,
    pub perturb_sd: f64,
    pub pooling: DiversityPooling,
    pub schedule: AnnealSchedule,
    trace: LunaTrace,
    epoch_sums: (f64, f64, f64, usize),
    epoch: usize,
}

impl<'a> LunaLoss<'a> {
    pub fn new(config: &LunaConfig, template: &'a MlpParams, x: &'a Mat, y: &'a [f64]) -> Self {
        Self {
            template,
            n_heads: config.heads,
            x,
            y,
            noise_var: config.noise_var,
            gamma: config.gamma,
            perturb_sd: config.perturb_sd,
            pooling: config.pooling,
            schedule: config.schedule,
            trace: LunaTrace::default(),
            epoch_sums: (0.0, 0.0, 0.0, 0),
            epoch: 0,
        }
    }

    /// Loss parts `(loss, fit per point, normalized diversity)` and gradient, with
    /// the perturbations fixed so the loss is a deterministic function of `theta`.
    pub fn eval(&self, theta: &[f64], batch: &[usize], deltas: &Mat, weight: f64, n_total: usize) -> Result<((f64, f64, f64), Vec<f64>)> {
        let (params, heads) = unpack(self.template, self.n_heads, theta);
        let xb = self.x.select_rows(batch);
        let yb: Vec<f64> = batch.iter().map(|&i| self.y[i]).collect();
        let b = batch.len();
        let bf = b.max(1) as f64;
        let m = self.n_heads;
        let mf = m as f64;
        let use_div = m >= 2 && weight != 0.0 && b > 0;
        let input = if use_div { stacked_inputs(&xb, deltas) } else { xb.clone() };
        let (phi_all, cache): (Mat, ForwardCache) = params.features_with_cache(&input)?;
        let width = phi_all.cols();
        let phi = Mat::from_fn(b, width, |i, j| phi_all[(i, j)]);

        // fit
        let outputs = phi.matmul_t(&heads);
        let fit: f64 = (0..m).map(|k| gaussian_fit(&outputs.col(k), &yb, self.noise_var)).sum::<f64>() / mf;
        let resid = Mat::from_fn(b, m, |i, k| outputs[(i, k)] - yb[i]);
        let s = 1.0 / (mf * bf * self.noise_var);
        let mut d_phi_all = Mat::zeros(phi_all.rows(), width);
        let d_phi_fit = resid.matmul(&heads).scale(s);
        for i in 0..b {
            d_phi_all.row_mut(i).copy_from_slice(d_phi_fit.row(i));
        }
        let mut d_heads = resid.t_matmul(&phi).scale(s);

        // diversity
        let mut div = 0.0;
        if use_div {
            let d = xb.cols();
            let groups = self.pooling.groups(b);
            let ng = groups.len() as f64;
            let coef = weight / (ng * pair_count(m));
            for group in &groups {
                let dphi = feature_differences(&phi_all, deltas, group);
                let g = dphi.matmul_t(&heads);
                let (p, dg) = pair_penalty(&g);
                div += p;
                let dg = dg.scale(coef);
                d_heads = d_heads.add(&dg.t_matmul(&dphi));
                let d_dphi = dg.matmul(&heads);
                for (r, (i, k)) in group.iter().flat_map(|&i| (0..d).map(move |k| (i, k))).enumerate() {
                    let inv = 1.0 / deltas[(i, k)];
                    let row = (k + 1) * b + i;
                    for j in 0..width {
                        let v = d_dphi[(r, j)] * inv;
                        d_phi_all[(row, j)] += v;
                        d_phi_all[(i, j)] -= v;
                    }
                }
            }
            div /= ng * pair_count(m);
        }

        let n = n_total.max(1) as f64;
        let reg: f64 = theta.iter().map(|t| t * t).sum();
        let loss = -fit / bf + weight * div + self.gamma * reg / n;

        let (g_params, _) = params.backward_features(&cache, &d_phi_all);
        let n_feat = self.template.spec.num_feature_params();
        let mut grad = g_params.to_flat();
        grad.truncate(n_feat);
        grad.extend_from_slice(d_heads.as_slice());
        for (gi, t) in grad.iter_mut().zip(theta) {
            *gi += 2.0 * self.gamma * t / n;
        }
        Ok(((loss, fit / bf, div), grad))
    }

    fn flush_epoch(&mut self) {
        let (f, d, w, c) = self.epoch_sums;
        if c > 0 {
            let c = c as f64;
            self.trace.fit.push(f / c);
            self.trace.diversity.push(d / c);
            self.trace.weight.push(w / c);
        }
        self.epoch_sums = (0.0, 0.0, 0.0, 0);
    }

    pub fn into_trace(mut self) -> LunaTrace {
        self.flush_epoch();
        self.trace
    }
}

impl Objective for LunaLoss<'_> {
    fn loss_grad(&mut self, theta: &[f64], batch: &[usize], ctx: &StepContext, stream: &mut RngStream) -> Result<(f64, Vec<f64>)> {
        if ctx.epoch != self.epoch {
            self.flush_epoch();
            self.epoch = ctx.epoch;
        }
        let m = self.n_heads;
        let weight = if m >= 2 {
            anneal(&self.schedule, ctx.epoch as f64)
        } else {
            0.0
        };
        let deltas = if m >= 2 && weight != 0.0 {
            draw_perturbations(batch.len(), self.x.cols(), self.perturb_sd, stream)
        } else {
            Mat::zeros(batch.len(), self.x.cols())
        };
        let ((loss, fit, div), grad) = self.eval(theta, batch, &deltas, weight, ctx.n_total)?;
        self.epoch_sums.0 += fit;
        self.epoch_sums.1 += div;
        self.epoch_sums.2 += weight;
        self.epoch_sums.3 += 1;
        Ok((loss, grad))
    }
}

/// Trained feature network and its auxiliary heads (rows of `heads`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxiliaryModel {
    /// Feature layers; the output layer mirrors head 0.
    pub params: MlpParams,
    pub heads: Mat,
}

#[derive(Debug, Clone)]
pub struct LunaRun {
    pub model: AuxiliaryModel,
    pub loss_trace: Vec<f64>,
    pub trace: LunaTrace,
}

/// Initialize from `stream.split(0)` / `split(2)` and train with `split(1)`.
pub fn train_luna(x: &Mat, y: &[f64], config: &LunaConfig, stream: &RngStream) -> Result<LunaRun> {
    config.validate()?;
    ensure_dim("luna targets", x.rows(), y.len())?;
    ensure_dim("luna input dimension", config.mlp.input_dim, x.cols())?;
    ensure_finite(x.as_slice(), "luna inputs")?;
    ensure_finite(y, "luna targets")?;
    let (params, heads) = init_with_heads(&config.mlp, config.heads, stream);
    let theta = pack(&params, &heads);
    let mut obj = LunaLoss::new(config, &params, x, y);
    let out = train(theta, x.rows(), &mut obj, &config.optimizer, &mut stream.split(1))?;
    let trace = obj.into_trace();
    let (p, h) = unpack(&params, config.heads, &out.theta);
    Ok(LunaRun {
        model: AuxiliaryModel {
            params: with_head(&p, &h),
            heads: h,
        },
        loss_trace: out.loss_trace,
        trace,
    })
}

pub fn luna_posterior(params: &MlpParams, x: &Mat, y: &[f64], alpha: f64, noise_var: f64) -> Result<BlrPosterior> {
    crate::nlm::nlm_posterior(params, x, y, alpha, noise_var)
}

pub fn tuna_posterior(params: &MlpParams, x: &Mat, y: &[f64], alpha: f64, noise_var: f64) -> Result<BlrPosterior> {
    crate::nlm::nlm_posterior(params, x, y, alpha, noise_var)
}

/// Validation summary of one LUNA run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunScore {
    pub validation_ll: f64,
    /// Normalized diversity penalty on the validation inputs.
    pub validation_diversity: f64,
}

/// Keep runs whose validation LL reaches the 90th percentile, then take the
/// least diverse-penalized one (first on ties). Returns its index.
pub fn select_luna_model(runs: &[RunScore]) -> Result<usize> {
    if runs.is_empty() {
        return Err(Error::EmptyInput("luna runs"));
    }
    let lls: Vec<f64> = runs.iter().map(|r| r.validation_ll).collect();
    let cut = percentile(&lls, 90.0);
    let mut best: Option<usize> = None;
    for (i, r) in runs.iter().enumerate() {
        if r.validation_ll >= cut && best.is_none_or(|b| r.validation_diversity < runs[b].validation_diversity) {
            best = Some(i);
        }
    }
    // the maximum always clears the cut
    Ok(best.unwrap())
}

/// One trained candidate of a LUNA hyperparameter search.
#[derive(Debug, Clone)]
pub struct LunaCandidate {
    pub scale: f64,
    pub run: LunaRun,
    pub score: RunScore,
}

/// Train one LUNA model per schedule scale (candidate `i` on `stream.split(i)`),
/// score each on the validation split and pick one with [`select_luna_model`].
pub fn luna_search(
    train_x: &Mat,
    train_y: &[f64],
    val_x: &Mat,
    val_y: &[f64],
    base: &LunaConfig,
    scales: &[f64],
    stream: &RngStream,
) -> Result<(usize, Vec<LunaCandidate>)> {
    if scales.is_empty() {
        return Err(Error::EmptyInput("luna schedule scales"));
    }
    let candidates = scales
        .iter()
        .enumerate()
        .map(|(i, &scale)| {
            let config = LunaConfig {
                schedule: AnnealSchedule { scale, ..base.schedule },
                ..base.clone()
            };
            let s = stream.split(i as u64);
            let run = train_luna(train_x, train_y, &config, &s)?;
            let post = luna_posterior(&run.model.params, train_x, train_y, base.alpha, base.noise_var)?;
            let dist = post.predict(&run.model.params.features(val_x)?)?;
            let score = RunScore {
                validation_ll: crate::blr::avg_log_likelihood(&dist, val_y)?,
                validation_diversity: diversity_penalty(&run.model.params, &run.model.heads, val_x, base.perturb_sd, base.pooling, &mut s.split(9), true)?,
            };
            Ok(LunaCandidate { scale, run, score })
        })
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<RunScore> = candidates.iter().map(|c| c.score).collect();
    Ok((select_luna_model(&scores)?, candidates))
}

/// Reference inputs and the `M` reference function values on them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSet {
    /// `I × D`.
    pub inputs: Mat,
    /// `I × M`; column `m` is reference function `m`.
    pub values: Mat,
}

impl ReferenceSet {
    pub fn new(inputs: Mat, values: Mat) -> Result<Self> {
        ensure_dim("reference value rows", inputs.rows(), values.rows())?;
        if inputs.rows() == 0 || values.cols() == 0 {
            return Err(Error::EmptyInput("reference set"));
        }
        ensure_finite(inputs.as_slice(), "reference inputs")?;
        ensure_finite(values.as_slice(), "reference values")?;
        Ok(Self { inputs, values })
    }

    pub fn num_functions(&self) -> usize {
        self.values.cols()
    }
}

/// Training inputs followed by one Gaussian-perturbed copy of each.
pub fn make_reference_points(x: &Mat, sd: f64, stream: &mut RngStream) -> Result<Mat> {
    if !(sd >= 0.0) {
        return Err(Error::InvalidConfig("reference perturbation sd must be >= 0".into()));
    }
    let noisy = Mat::from_fn(x.rows(), x.cols(), |i, j| x[(i, j)] + sd * stream.next_normal());
    Ok(x.vstack(&noisy))
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReferenceGenerator {
    GpPrior(KernelSpec),
    /// Precomputed `I × M` values.
    UserValues(Mat),
}

pub fn build_reference_set(inputs: &Mat, generator: &ReferenceGenerator, m: usize, stream: &mut RngStream) -> Result<ReferenceSet> {
    if m == 0 {
        return Err(Error::InvalidConfig("need at least one reference function".into()));
    }
    let values = match generator {
        ReferenceGenerator::GpPrior(kernel) => gp_prior_sample(kernel, inputs, m, stream)?,
        ReferenceGenerator::UserValues(v) => {
            ensure_dim("reference value rows", inputs.rows(), v.rows())?;
            ensure_dim("reference function count", m, v.cols())?;
            v.clone()
        }
    };
    ReferenceSet::new(inputs.clone(), values)
}

/// Targets for pseudo reference points.
#[derive(Debug, Clone, PartialEq)]
pub enum PseudoTargets {
    /// One value per point, copied to every reference function.
    Broadcast(Vec<f64>),
    /// `P × M` values.
    PerFunction(Mat),
}

pub fn tuna_pseudo_augment(set: &ReferenceSet, inputs: &Mat, targets: &PseudoTargets) -> Result<ReferenceSet> {
    if inputs.rows() == 0 {
        return Ok(set.clone());
    }
    ensure_dim("pseudo input dimension", set.inputs.cols(), inputs.cols())?;
    let m = set.num_functions();
    let extra = match targets {
        PseudoTargets::Broadcast(v) => {
            ensure_dim("pseudo targets", inputs.rows(), v.len())?;
            Mat::from_fn(v.len(), m, |i, _| v[i])
        }
        PseudoTargets::PerFunction(t) => {
            ensure_dim("pseudo target rows", inputs.rows(), t.rows())?;
            ensure_dim("pseudo target columns", m, t.cols())?;
            t.clone()
        }
    };
    ReferenceSet::new(set.inputs.vstack(inputs), set.values.vstack(&extra))
}

/// Minibatch TUNA loss: `(1/(M·B)) Σ_{i∈B} Σ_m (g_m(x̃_i) − φ(x̃_i)ᵀw̃_m)²`.
pub struct TunaLoss<'a> {
    pub template: &'a MlpParams,
    pub set: &'a ReferenceSet,
    /// Keep the feature layers fixed and fit the heads only.
    pub freeze_features: bool,
}

impl TunaLoss<'_> {
    pub fn eval(&self, theta: &[f64], batch: &[usize]) -> Result<(f64, Vec<f64>)> {
        let m = self.set.num_functions();
        let (params, heads) = unpack(self.template, m, theta);
        let xb = self.set.inputs.select_rows(batch);
        let gb = self.set.values.select_rows(batch);
        let (phi, cache) = params.features_with_cache(&xb)?;
        let resid = phi.matmul_t(&heads).sub(&gb);
        let scale = 1.0 / (m as f64 * batch.len().max(1) as f64);
        let loss = resid.as_slice().iter().map(|r| r * r).sum::<f64>() * scale;
        let d_heads = resid.t_matmul(&phi).scale(2.0 * scale);
        let n_feat = self.template.spec.num_feature_params();
        let mut grad = if self.freeze_features {
            vec![0.0; n_feat]
        } else {
            let d_phi = resid.matmul(&heads).scale(2.0 * scale);
            let mut g = params.backward_features(&cache, &d_phi).0.to_flat();
            g.truncate(n_feat);
            g
        };
        grad.extend_from_slice(d_heads.as_slice());
        Ok((loss, grad))
    }
}

impl Objective for TunaLoss<'_> {
    fn loss_grad(&mut self, theta: &[f64], batch: &[usize], _ctx: &StepContext, _s: &mut RngStream) -> Result<(f64, Vec<f64>)> {
        self.eval(theta, batch)
    }
}

#[derive(Debug, Clone)]
pub struct TunaRun {
    pub model: AuxiliaryModel,
    pub loss_trace: Vec<f64>,
}

pub fn train_tuna(set: &ReferenceSet, spec: &MlpSpec, optimizer: &OptimizerConfig, stream: &RngStream) -> Result<TunaRun> {
    spec.validate()?;
    if spec.hidden.is_empty() {
        return Err(Error::InvalidConfig("feature network needs at least one hidden layer".into()));
    }
    ensure_dim("reference input dimension", spec.input_dim, set.inputs.cols())?;
    let m = set.num_functions();
    let (params, heads) = init_with_heads(spec, m, stream);
    let mut obj = TunaLoss {
        template: &params,
        set,
        freeze_features: false,
    };
    let out = train(pack(&params, &heads), set.inputs.rows(), &mut obj, optimizer, &mut stream.split(1))?;
    let (p, h) = unpack(&params, m, &out.theta);
    Ok(TunaRun {
        model: AuxiliaryModel {
            params: with_head(&p, &h),
            heads: h,
        },
        loss_trace: out.loss_trace,
    })
}

/// Weight prior variance whose prior predictive second moment, averaged over the
/// reference points, equals that of the reference functions:
/// `mean g_m(x̃_i)² / mean ‖φ(x̃_i)‖²`.
pub fn reference_prior_variance(params: &MlpParams, set: &ReferenceSet) -> Result<f64> {
    let phi = params.features(&set.inputs)?;
    let values = set.values.as_slice();
    let target = values.iter().map(|v| v * v).sum::<f64>() / values.len().max(1) as f64;
    let basis = phi.as_slice().iter().map(|v| v * v).sum::<f64>() / phi.rows().max(1) as f64;
    let alpha = target / basis;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::NonFinite("reference prior variance"));
    }
    Ok(alpha)
}

/// Prior predictive of the neural linear model over `params` (no data).
pub fn prior_predictive(params: &MlpParams, x: &Mat, alpha: f64, noise_var: f64) -> Result<crate::blr::PredictiveDist> {
    let prior = BlrPosterior::prior(params.spec.feature_dim(), alpha, noise_var)?;
    NeuralLinear {
        params: params.clone(),
        posterior: prior,
    }
    .predict(x)
}


#[cfg(test)]
mod grad_tests {
    use super::*;

    fn check(act: Activation, pooling: DiversityPooling, seed: u64) {
        let spec = MlpSpec::new(2, vec![5, 4], act).unwrap();
        let cfg = LunaConfig {
            mlp: spec.clone(),
            heads: 3,
            gamma: 0.05,
            alpha: 1.0,
            noise_var: 0.5,
            perturb_sd: 0.3,
            pooling,
            schedule: AnnealSchedule { kind: AnnealKind::Constant, scale: 2.0, epochs: 1 },
            optimizer: OptimizerConfig::adam(0.01, 1),
        };
        let mut s = RngStream::new(seed);
        let x = Mat::from_vec(6, 2, s.standard_normal(12));
        let y = s.standard_normal(6);
        let (params, heads) = init_with_heads(&spec, 3, &RngStream::new(seed + 1));
        let theta = pack(&params, &heads);
        let loss = LunaLoss::new(&cfg, &params, &x, &y);
        let batch = [0, 2, 3, 5];
        let deltas = draw_perturbations(4, 2, 0.3, &mut s);
        let ((_, _, _), grad) = loss.eval(&theta, &batch, &deltas, 1.7, 6).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for k in 0..theta.len() {
            let mut tp = theta.clone();
            tp[k] += h;
            let mut tm = theta.clone();
            tm[k] -= h;
            let fp = loss.eval(&tp, &batch, &deltas, 1.7, 6).unwrap().0 .0;
            let fm = loss.eval(&tm, &batch, &deltas, 1.7, 6).unwrap().0 .0;
            let fd = (fp - fm) / (2.0 * h);
            worst = worst.max((fd - grad[k]).abs() / (1e-6 + fd.abs().max(grad[k].abs())));
        }
        assert!(worst < 1e-4, "{act:?} {pooling:?} seed {seed}: {worst}");
    }

    #[test]
    fn luna_loss_gradient_matches_central_differences() {
        for seed in 0..5 {
            check(Activation::Tanh, DiversityPooling::PerPoint, seed);
            check(Activation::Tanh, DiversityPooling::Batch, seed);
        }
    }

    #[test]
    fn batch_pooling_breaks_the_one_dimensional_degeneracy() {
        let spec = MlpSpec::new(1, vec![8], Activation::Tanh).unwrap();
        let (params, heads) = init_with_heads(&spec, 4, &RngStream::new(3));
        let x = Mat::column(&[-1.0, -0.3, 0.4, 1.2, 2.0]);
        let per_point = diversity_penalty(&params, &heads, &x, 0.01, DiversityPooling::PerPoint, &mut RngStream::new(1), true).unwrap();
        assert!((per_point - 1.0).abs() < 1e-12);
        let pooled = diversity_penalty(&params, &heads, &x, 0.01, DiversityPooling::Batch, &mut RngStream::new(1), true).unwrap();
        assert!(pooled < 1.0 - 1e-3, "{pooled}");
    }
}
