//! Fixed-architecture multilayer perceptron with exact reverse-mode gradients,
//! the GD / SGD / Adam optimizers and a generic minibatch training loop.
//!
//! Layer `l` maps `h ↦ act(h·Wₗᵀ + bₗ)`; the final layer is linear with a single
//! output. The *feature basis* of a network is the last hidden activation with a
//! trailing column of ones, so the output layer `(W_out, b_out)` is exactly a
//! linear head `w̃` over that basis.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::numkit::{Mat, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    /// Linear units; used for linear feature maps.
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and activation `a`.
    /// The ReLU subgradient at 0 is 0.
    #[inline]
    pub fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    #[serde(default = "default_output_dim")]
    pub output_dim: usize,
}

fn default_output_dim() -> usize {
    1
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, activation: Activation) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden,
            activation,
            output_dim: 1,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig("input dimension must be >= 1".into()));
        }
        if let Some(i) = self.hidden.iter().position(|&w| w == 0) {
            return Err(Error::InvalidConfig(format!("hidden layer {i} has width 0")));
        }
        if self.output_dim != 1 {
            return Err(Error::InvalidConfig("only single-output regression networks are supported".into()));
        }
        Ok(())
    }

    /// Number of basis columns produced by [`MlpParams::features`] (last width + bias).
    pub fn feature_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim) + 1
    }

    /// `(fan_out, fan_in)` of every layer, output layer last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input_dim;
        for &w in &self.hidden {
            shapes.push((w, fan_in));
            fan_in = w;
        }
        shapes.push((self.output_dim, fan_in));
        shapes
    }

    pub fn num_params(&self) -> usize {
        self.layer_shapes().iter().map(|(o, i)| o * i + o).sum()
    }

    /// Parameters in every layer but the output head.
    pub fn num_feature_params(&self) -> usize {
        let (o, i) = *self.layer_shapes().last().unwrap();
        self.num_params() - (o * i + o)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `fan_out × fan_in`.
    pub weights: Mat,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(fan_out: usize, fan_in: usize) -> Self {
        Self {
            weights: Mat::zeros(fan_out, fan_in),
            bias: vec![0.0; fan_out],
        }
    }

    fn affine(&self, input: &Mat) -> Mat {
        let mut z = input.matmul_t(&self.weights);
        for i in 0..z.rows() {
            for (v, b) in z.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        z
    }
}

/// Network parameters; the same type also holds gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
}

/// Activations kept by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Mat,
    pre: Vec<Mat>,
    post: Vec<Mat>,
    masks: Option<Vec<Mat>>,
}

impl ForwardCache {
    /// Last hidden activation (after any dropout mask), without the bias column.
    pub fn last_hidden(&self) -> &Mat {
        self.post.last().unwrap_or(&self.input)
    }
}

/// He-style init for ReLU (`N(0, 2/fan_in)`), Xavier-style otherwise (`N(0, 1/fan_in)`); zero biases.
pub fn mlp_init(spec: &MlpSpec, stream: &mut RngStream) -> MlpParams {
    let gain = match spec.activation {
        Activation::Relu => 2.0,
        Activation::Tanh | Activation::Identity => 1.0,
    };
    let layers = spec
        .layer_shapes()
        .into_iter()
        .map(|(o, i)| {
            let sd = (gain / i as f64).sqrt();
            let w = stream.standard_normal(o * i).into_iter().map(|z| z * sd).collect();
            Layer {
                weights: Mat::from_vec(o, i, w),
                bias: vec![0.0; o],
            }
        })
        .collect();
    MlpParams {
        spec: spec.clone(),
        layers,
    }
}

impl MlpParams {
    pub fn zeros(spec: &MlpSpec) -> Self {
        Self {
            spec: spec.clone(),
            layers: spec.layer_shapes().into_iter().map(|(o, i)| Layer::zeros(o, i)).collect(),
        }
    }

    /// Every weight and bias drawn from `N(0, sd²)`.
    pub fn gaussian(spec: &MlpSpec, sd: f64, stream: &mut RngStream) -> Self {
        let flat: Vec<f64> = stream.standard_normal(spec.num_params()).into_iter().map(|z| z * sd).collect();
        Self::from_flat(spec, &flat)
    }

    pub fn num_params(&self) -> usize {
        self.spec.num_params()
    }

    /// Layout: per layer, weights row-major then bias; output layer last.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            out.extend_from_slice(layer.weights.as_slice());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    /// Panics if `flat` has the wrong length.
    pub fn from_flat(spec: &MlpSpec, flat: &[f64]) -> Self {
        assert_eq!(flat.len(), spec.num_params(), "MlpParams::from_flat: length");
        let mut offset = 0;
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(o, i)| {
                let w = flat[offset..offset + o * i].to_vec();
                offset += o * i;
                let b = flat[offset..offset + o].to_vec();
                offset += o;
                Layer {
                    weights: Mat::from_vec(o, i, w),
                    bias: b,
                }
            })
            .collect();
        Self {
            spec: spec.clone(),
            layers,
        }
    }

    /// Flat feature-layer parameters (everything except the output head).
    pub fn feature_flat(&self) -> Vec<f64> {
        let mut flat = self.to_flat();
        flat.truncate(self.spec.num_feature_params());
        flat
    }

    /// Replace the feature-layer parameters, keeping the output head.
    pub fn with_feature_flat(&self, feature: &[f64]) -> Self {
        let mut flat = self.to_flat();
        let n = self.spec.num_feature_params();
        assert_eq!(feature.len(), n, "with_feature_flat: length");
        flat[..n].copy_from_slice(feature);
        Self::from_flat(&self.spec, &flat)
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.to_flat().iter().map(|v| v * v).sum()
    }

    /// Output head `w̃` laid out to match the feature basis (weights, then bias).
    pub fn head(&self) -> Vec<f64> {
        let out = self.layers.last().unwrap();
        let mut w = out.weights.row(0).to_vec();
        w.push(out.bias[0]);
        w
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    fn check_input(&self, x: &Mat) -> Result<()> {
        ensure_dim("network input columns", self.spec.input_dim, x.cols())?;
        if !x.is_finite() {
            return Err(Error::NonFinite("network input"));
        }
        Ok(())
    }

    fn hidden_pass(&self, x: &Mat, masks: Option<&[Mat]>) -> ForwardCache {
        let act = self.spec.activation;
        let n_hidden = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(n_hidden);
        let mut post = Vec::with_capacity(n_hidden);
        for l in 0..n_hidden {
            let input = if l == 0 { x } else { &post[l - 1] };
            let z = self.layers[l].affine(input);
            let mut a = z.map(|v| act.apply(v));
            if let Some(m) = masks {
                for (av, mv) in a.as_mut_slice().iter_mut().zip(m[l].as_slice()) {
                    *av *= mv;
                }
            }
            pre.push(z);
            post.push(a);
        }
        ForwardCache {
            input: x.clone(),
            pre,
            post,
            masks: masks.map(|m| m.to_vec()),
        }
    }

    /// Network outputs and the activation cache.
    pub fn forward(&self, x: &Mat) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_input(x)?;
        let cache = self.hidden_pass(x, None);
        let out = self.layers.last().unwrap().affine(cache.last_hidden()).into_vec();
        Ok((out, cache))
    }

    /// Forward pass with multiplicative masks on every hidden activation
    /// (`masks[l]` has the shape of hidden layer `l`'s output).
    pub fn forward_masked(&self, x: &Mat, masks: &[Mat]) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_input(x)?;
        ensure_dim("dropout mask count", self.layers.len() - 1, masks.len())?;
        for (l, m) in masks.iter().enumerate() {
            ensure_dim("dropout mask rows", x.rows(), m.rows())?;
            ensure_dim("dropout mask cols", self.spec.hidden[l], m.cols())?;
        }
        let cache = self.hidden_pass(x, Some(masks));
        let out = self.layers.last().unwrap().affine(cache.last_hidden()).into_vec();
        Ok((out, cache))
    }

    pub fn predict(&self, x: &Mat) -> Result<Vec<f64>> {
        self.forward(x).map(|(out, _)| out)
    }

    /// Feature basis `Φ_θ`: last hidden activation with a trailing ones column.
    pub fn features(&self, x: &Mat) -> Result<Mat> {
        self.features_with_cache(x).map(|(phi, _)| phi)
    }

    pub fn features_with_cache(&self, x: &Mat) -> Result<(Mat, ForwardCache)> {
        self.check_input(x)?;
        let cache = self.hidden_pass(x, None);
        Ok((cache.last_hidden().with_ones_column(), cache))
    }

    /// Gradient of a scalar loss given `dLoss/dOutputs`.
    pub fn backward(&self, cache: &ForwardCache, d_out: &[f64]) -> MlpParams {
        self.backward_with_input(cache, d_out).0
    }

    /// As [`backward`](Self::backward), also returning `dLoss/dX`.
    pub fn backward_with_input(&self, cache: &ForwardCache, d_out: &[f64]) -> (MlpParams, Mat) {
        let h = cache.last_hidden();
        assert_eq!(d_out.len(), h.rows(), "backward: upstream length");
        let mut grads = MlpParams::zeros(&self.spec);
        let out_layer = self.layers.last().unwrap();
        let g_out = grads.layers.last_mut().unwrap();
        g_out.weights = Mat::from_vec(1, h.cols(), h.t_matvec(d_out));
        g_out.bias[0] = d_out.iter().sum();
        let d_hidden = Mat::column(d_out).matmul(&out_layer.weights);
        let d_x = self.backprop_hidden(cache, d_hidden, &mut grads);
        (grads, d_x)
    }

    /// Gradient of a scalar loss given `dLoss/dΦ` (N × feature_dim). The bias
    /// column of `Φ` is constant, so its upstream entries are ignored; output
    /// head gradients are zero.
    pub fn backward_features(&self, cache: &ForwardCache, d_phi: &Mat) -> (MlpParams, Mat) {
        let h = cache.last_hidden();
        assert_eq!(d_phi.rows(), h.rows(), "backward_features: rows");
        assert_eq!(d_phi.cols(), h.cols() + 1, "backward_features: cols");
        let d_hidden = Mat::from_fn(h.rows(), h.cols(), |i, j| d_phi[(i, j)]);
        let mut grads = MlpParams::zeros(&self.spec);
        let d_x = self.backprop_hidden(cache, d_hidden, &mut grads);
        (grads, d_x)
    }

    fn backprop_hidden(&self, cache: &ForwardCache, mut d_a: Mat, grads: &mut MlpParams) -> Mat {
        let act = self.spec.activation;
        for l in (0..self.layers.len() - 1).rev() {
            if let Some(masks) = &cache.masks {
                for (d, m) in d_a.as_mut_slice().iter_mut().zip(masks[l].as_slice()) {
                    *d *= m;
                }
            }
            let z = &cache.pre[l];
            let a = &cache.post[l];
            let mut d_z = d_a;
            for ((d, &zv), &av) in d_z.as_mut_slice().iter_mut().zip(z.as_slice()).zip(a.as_slice()) {
                // with a mask the cached post value is masked; tanh' needs the raw activation
                let raw = if cache.masks.is_some() { act.apply(zv) } else { av };
                *d *= act.derivative(zv, raw);
            }
            let input = if l == 0 { &cache.input } else { &cache.post[l - 1] };
            grads.layers[l].weights = d_z.t_matmul(input);
            let mut db = vec![0.0; d_z.cols()];
            for i in 0..d_z.rows() {
                for (b, v) in db.iter_mut().zip(d_z.row(i)) {
                    *b += v;
                }
            }
            grads.layers[l].bias = db;
            d_a = d_z.matmul(&self.layers[l].weights);
        }
        d_a
    }
}

/// Mean squared error `(1/N)‖f(X) − y‖²` and its gradient.
pub fn mse_loss_grad(params: &MlpParams, x: &Mat, y: &[f64]) -> Result<(f64, MlpParams)> {
    ensure_dim("mse targets", x.rows(), y.len())?;
    let (out, cache) = params.forward(x)?;
    let n = y.len().max(1) as f64;
    let resid: Vec<f64> = out.iter().zip(y).map(|(f, t)| f - t).collect();
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / n;
    let d_out: Vec<f64> = resid.iter().map(|r| 2.0 * r / n).collect();
    Ok((loss, params.backward(&cache, &d_out)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Gd,
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// 0 means full batch. Ignored by GD.
    #[serde(default)]
    pub batch_size: usize,
    pub epochs: usize,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64, epochs: usize) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            batch_size: 0,
            epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("Adam decays must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("Adam epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-run optimizer state (Adam moments and step counter).
#[derive(Debug, Clone)]
pub struct OptimizerState {
    config: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptimizerState {
    pub fn new(config: &OptimizerConfig, n_params: usize) -> Self {
        Self {
            config: config.clone(),
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One descent step on `theta`. GD/SGD: `θ ← θ − η·g`. Adam: bias-corrected moments.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        assert_eq!(theta.len(), grad.len(), "optimizer step: gradient length");
        assert_eq!(theta.len(), self.m.len(), "optimizer step: parameter length");
        let c = &self.config;
        self.t += 1;
        match c.kind {
            OptimizerKind::Gd | OptimizerKind::Sgd => {
                for (p, g) in theta.iter_mut().zip(grad) {
                    *p -= c.learning_rate * g;
                }
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - c.beta1.powi(self.t);
                let bc2 = 1.0 - c.beta2.powi(self.t);
                for i in 0..theta.len() {
                    let g = grad[i];
                    self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
                    self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    theta[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
                }
            }
        }
    }
}

/// Where in training a step happens.
#[derive(Debug, Clone, Copy)]
pub struct StepContext {
    pub epoch: usize,
    pub epochs: usize,
    /// Rows in the full training set.
    pub n_total: usize,
}

/// A differentiable training objective over a flat parameter vector.
pub trait Objective {
    /// Loss to *minimize* on the batch rows, and its gradient.
    fn loss_grad(&mut self, theta: &[f64], batch: &[usize], ctx: &StepContext, stream: &mut RngStream) -> Result<(f64, Vec<f64>)>;

    /// Hook run after every optimizer step (e.g. weight projections).
    fn after_step(&mut self, _theta: &mut [f64]) {}
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub theta: Vec<f64>,
    /// Mean batch loss per epoch.
    pub loss_trace: Vec<f64>,
}

/// Minibatch training loop. Batches come from a per-epoch shuffle drawn from
/// `stream`; the final short batch is kept. Full-batch runs do not shuffle.
pub fn train<O: Objective + ?Sized>(
    theta: Vec<f64>,
    n_rows: usize,
    objective: &mut O,
    config: &OptimizerConfig,
    stream: &mut RngStream,
) -> Result<TrainOutput> {
    config.validate()?;
    let mut theta = theta;
    let mut state = OptimizerState::new(config, theta.len());
    let batch_size = match config.kind {
        OptimizerKind::Gd => 0,
        _ => config.batch_size,
    };
    let full_batch = batch_size == 0 || batch_size >= n_rows;
    let all_rows: Vec<usize> = (0..n_rows).collect();
    let mut loss_trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let ctx = StepContext {
            epoch,
            epochs: config.epochs,
            n_total: n_rows,
        };
        let order = if full_batch { all_rows.clone() } else { stream.permutation(n_rows) };
        let chunk = if full_batch { n_rows.max(1) } else { batch_size };
        let mut total = 0.0;
        let mut batches = 0usize;
        let mut chunks: Vec<&[usize]> = order.chunks(chunk).collect();
        if chunks.is_empty() {
            chunks.push(&[]);
        }
        for batch in chunks {
            let (loss, grad) = objective.loss_grad(&theta, batch, &ctx, stream)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, loss });
            }
            state.step(&mut theta, &grad);
            objective.after_step(&mut theta);
            total += loss;
            batches += 1;
        }
        loss_trace.push(total / batches as f64);
    }
    Ok(TrainOutput { theta, loss_trace })
}

/// Plain MSE objective over a whole network, with optional `γ‖θ‖²`.
pub struct MseObjective<'a> {
    pub spec: &'a MlpSpec,
    pub x: &'a Mat,
    pub y: &'a [f64],
    pub gamma: f64,
}

impl Objective for MseObjective<'_> {
    fn loss_grad(&mut self, theta: &[f64], batch: &[usize], _ctx: &StepContext, _s: &mut RngStream) -> Result<(f64, Vec<f64>)> {
        let params = MlpParams::from_flat(self.spec, theta);
        let xb = self.x.select_rows(batch);
        let yb: Vec<f64> = batch.iter().map(|&i| self.y[i]).collect();
        let (loss, grads) = mse_loss_grad(&params, &xb, &yb)?;
        let mut g = grads.to_flat();
        let reg: f64 = theta.iter().map(|t| t * t).sum();
        for (gi, t) in g.iter_mut().zip(theta) {
            *gi += 2.0 * self.gamma * t;
        }
        Ok((loss + self.gamma * reg, g))
    }
}
