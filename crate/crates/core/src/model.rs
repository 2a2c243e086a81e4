//! One configuration type and one trained-model type covering every model
//! kind, so harnesses (CLI, RUB, Bayesian optimization) can treat them alike.
//!
//! All models are trained and queried on normalized data; callers own the
//! normalization statistics.

use serde::{Deserialize, Serialize};

use crate::baselines::{
    bnn_hmc_sample, ensemble_predict, mcd_predict, mcd_train, moments_across, train_ensemble, train_sngp, Ensemble, EnsembleConfig,
    EnsembleVariant, HmcConfig, McdConfig, McdModel, SngpConfig, SngpModel,
};
use crate::blr::PredictiveDist;
use crate::error::{Error, Result};
use crate::gp::{gp_fit, gp_grid_search, GpPosterior, KernelSpec};
use crate::net::{Activation, MlpParams, MlpSpec, OptimizerConfig};
use crate::nlm::{train_nlm, NeuralLinear, NlmConfig, TrainMode};
use crate::numkit::{Mat, RngStream};
use crate::una::{
    build_reference_set, reference_prior_variance, DiversityPooling, luna_search, make_reference_points, train_luna, train_tuna, tuna_pseudo_augment, AnnealSchedule,
    LunaConfig, PseudoTargets, ReferenceGenerator,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NlmSettings {
    pub mlp: MlpSpec,
    pub alpha: f64,
    pub noise_var: f64,
    #[serde(default)]
    pub gamma: f64,
    pub optimizer: OptimizerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LunaSettings {
    pub mlp: MlpSpec,
    pub heads: usize,
    #[serde(default)]
    pub gamma: f64,
    pub alpha: f64,
    pub noise_var: f64,
    pub perturb_sd: f64,
    #[serde(default)]
    pub pooling: DiversityPooling,
    pub schedule: AnnealSchedule,
    pub optimizer: OptimizerConfig,
    /// Schedule scales to search over; empty trains the given schedule once.
    #[serde(default)]
    pub scale_grid: Vec<f64>,
    /// Share of the training rows held out for the search.
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
}

fn default_validation_fraction() -> f64 {
    0.2
}

impl LunaSettings {
    pub fn config(&self) -> LunaConfig {
        LunaConfig {
            mlp: self.mlp.clone(),
            heads: self.heads,
            gamma: self.gamma,
            alpha: self.alpha,
            noise_var: self.noise_var,
            perturb_sd: self.perturb_sd,
            pooling: self.pooling,
            schedule: self.schedule,
            optimizer: self.optimizer.clone(),
        }
    }
}

/// Pseudo reference points with one target shared by every reference function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoPoints {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TunaSettings {
    pub mlp: MlpSpec,
    /// Number of reference functions `M`.
    pub heads: usize,
    pub optimizer: OptimizerConfig,
    /// GP prior the reference functions are drawn from.
    pub reference_kernel: KernelSpec,
    /// Perturbation sd for the second copy of the training inputs.
    pub reference_sd: f64,
    /// Head prior variance; `None` matches the prior predictive second moment to
    /// the reference functions.
    #[serde(default)]
    pub alpha: Option<f64>,
    pub noise_var: f64,
    #[serde(default)]
    pub pseudo: Option<PseudoPoints>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpSettings {
    pub kernel: KernelSpec,
    pub noise_var: f64,
    /// Lengthscales tried by evidence maximization; empty keeps the kernel's.
    #[serde(default)]
    pub length_scales: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSettings {
    #[serde(default = "default_members")]
    pub members: usize,
    #[serde(default)]
    pub gamma: f64,
    pub mlp: MlpSpec,
    pub optimizer: OptimizerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchoredSettings {
    #[serde(default = "default_members")]
    pub members: usize,
    pub init_var: f64,
    pub prior_var: f64,
    pub noise_var: f64,
    pub mlp: MlpSpec,
    pub optimizer: OptimizerConfig,
}

fn default_members() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McdSettings {
    pub dropout: f64,
    pub passes: usize,
    #[serde(default)]
    pub gamma: f64,
    pub noise_var: f64,
    pub mlp: MlpSpec,
    pub optimizer: OptimizerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BnnSettings {
    pub mlp: MlpSpec,
    pub hmc: HmcConfig,
}

/// A model kind with its settings; the JSON form carries a `"kind"` tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelSpec {
    NlmMap(NlmSettings),
    NlmMle(NlmSettings),
    NlmMarginal(NlmSettings),
    Luna(LunaSettings),
    Tuna(TunaSettings),
    Gp(GpSettings),
    Ensemble(EnsembleSettings),
    EnsembleBoot(EnsembleSettings),
    EnsembleAnchored(AnchoredSettings),
    Mcd(McdSettings),
    Sngp(SngpConfig),
    BnnHmc(BnnSettings),
}

pub const MODEL_KINDS: [&str; 12] = [
    "nlm-map",
    "nlm-mle",
    "nlm-marginal",
    "luna",
    "tuna",
    "gp",
    "ensemble",
    "ensemble-boot",
    "ensemble-anchored",
    "mcd",
    "sngp",
    "bnn-hmc",
];

impl ModelSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelSpec::NlmMap(_) => "nlm-map",
            ModelSpec::NlmMle(_) => "nlm-mle",
            ModelSpec::NlmMarginal(_) => "nlm-marginal",
            ModelSpec::Luna(_) => "luna",
            ModelSpec::Tuna(_) => "tuna",
            ModelSpec::Gp(_) => "gp",
            ModelSpec::Ensemble(_) => "ensemble",
            ModelSpec::EnsembleBoot(_) => "ensemble-boot",
            ModelSpec::EnsembleAnchored(_) => "ensemble-anchored",
            ModelSpec::Mcd(_) => "mcd",
            ModelSpec::Sngp(_) => "sngp",
            ModelSpec::BnnHmc(_) => "bnn-hmc",
        }
    }

    /// Desk-scale starting settings for `kind` on `input_dim`-dimensional
    /// inputs: two ReLU layers of 50, Adam at 1e-3 for 2000 epochs, noise
    /// variance 0.1 in normalized target units.
    pub fn template(kind: &str, input_dim: usize) -> Result<ModelSpec> {
        let mlp = MlpSpec::new(input_dim, vec![50, 50], Activation::Relu)?;
        let optimizer = OptimizerConfig::adam(1e-3, 2000);
        let noise_var = 0.1;
        let nlm = NlmSettings { mlp: mlp.clone(), alpha: 1.0, noise_var, gamma: 1e-4, optimizer: optimizer.clone() };
        let ensemble = EnsembleSettings { members: 5, gamma: 1e-4, mlp: mlp.clone(), optimizer: optimizer.clone() };
        Ok(match kind {
            "nlm-map" => ModelSpec::NlmMap(nlm),
            "nlm-mle" => ModelSpec::NlmMle(NlmSettings { gamma: 0.0, ..nlm }),
            "nlm-marginal" => ModelSpec::NlmMarginal(nlm),
            "luna" => ModelSpec::Luna(LunaSettings {
                mlp,
                heads: 20,
                gamma: 1e-4,
                alpha: 1.0,
                noise_var,
                perturb_sd: 0.1,
                pooling: if input_dim == 1 { DiversityPooling::Batch } else { DiversityPooling::PerPoint },
                schedule: AnnealSchedule { kind: crate::una::AnnealKind::Sigmoid, scale: 10.0, epochs: optimizer.epochs },
                optimizer,
                scale_grid: Vec::new(),
                validation_fraction: default_validation_fraction(),
            }),
            "tuna" => ModelSpec::Tuna(TunaSettings {
                mlp,
                heads: 20,
                optimizer,
                reference_kernel: KernelSpec::rbf(1.0, 0.5),
                reference_sd: 0.5,
                alpha: None,
                noise_var,
                pseudo: None,
            }),
            "gp" => ModelSpec::Gp(GpSettings {
                kernel: KernelSpec::matern52(1.0, 1.0),
                noise_var,
                length_scales: vec![0.05, 0.1, 0.2, 0.3, 0.5, 0.8, 1.2, 2.0],
            }),
            "ensemble" => ModelSpec::Ensemble(ensemble),
            "ensemble-boot" => ModelSpec::EnsembleBoot(ensemble),
            "ensemble-anchored" => ModelSpec::EnsembleAnchored(AnchoredSettings {
                members: 5,
                init_var: 1.0,
                prior_var: 1.0,
                noise_var,
                mlp,
                optimizer,
            }),
            "mcd" => ModelSpec::Mcd(McdSettings { dropout: 0.1, passes: 100, gamma: 1e-4, noise_var, mlp, optimizer }),
            "sngp" => ModelSpec::Sngp(SngpConfig {
                norm_bound: 1.0,
                power_iters: 1,
                rff_dim: 128,
                length_scale: 1.0,
                alpha: 1.0,
                noise_var,
                gamma: 1e-4,
                mlp,
                optimizer,
            }),
            "bnn-hmc" => ModelSpec::BnnHmc(BnnSettings {
                mlp: MlpSpec::new(input_dim, vec![20], Activation::Relu)?,
                hmc: HmcConfig {
                    step_size: 1e-3,
                    leapfrog_steps: 20,
                    iterations: 1000,
                    burn_in: 200,
                    thinning: 5,
                    mass: 1.0,
                    prior_sd: 1.0,
                    noise_sd: noise_var.sqrt(),
                },
            }),
            other => return Err(Error::InvalidConfig(format!("unknown model kind '{other}' (expected one of {})", MODEL_KINDS.join(", ")))),
        })
    }

    /// Input dimension fixed by the network spec; `None` for the GP.
    pub fn input_dim(&self) -> Option<usize> {
        match self {
            ModelSpec::NlmMap(s) | ModelSpec::NlmMle(s) | ModelSpec::NlmMarginal(s) => Some(s.mlp.input_dim),
            ModelSpec::Luna(s) => Some(s.mlp.input_dim),
            ModelSpec::Tuna(s) => Some(s.mlp.input_dim),
            ModelSpec::Gp(_) => None,
            ModelSpec::Ensemble(s) | ModelSpec::EnsembleBoot(s) => Some(s.mlp.input_dim),
            ModelSpec::EnsembleAnchored(s) => Some(s.mlp.input_dim),
            ModelSpec::Mcd(s) => Some(s.mlp.input_dim),
            ModelSpec::Sngp(s) => Some(s.mlp.input_dim),
            ModelSpec::BnnHmc(s) => Some(s.mlp.input_dim),
        }
    }

    /// Configuration checks that need no data.
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, what: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{what} must be > 0")))
            }
        };
        match self {
            ModelSpec::NlmMap(s) | ModelSpec::NlmMle(s) | ModelSpec::NlmMarginal(s) => self.nlm_config(s).validate(),
            ModelSpec::Luna(s) => {
                s.config().validate()?;
                if !(s.validation_fraction > 0.0 && s.validation_fraction < 1.0) {
                    return Err(Error::InvalidConfig("validation fraction must lie in (0, 1)".into()));
                }
                s.scale_grid.iter().try_for_each(|&c| positive(c, "schedule scale"))
            }
            ModelSpec::Tuna(s) => {
                s.mlp.validate()?;
                s.optimizer.validate()?;
                s.reference_kernel.validate()?;
                positive(s.noise_var, "noise variance")?;
                if let Some(a) = s.alpha {
                    positive(a, "alpha")?;
                }
                if s.heads == 0 || !(s.reference_sd >= 0.0) {
                    return Err(Error::InvalidConfig("need at least one reference function and reference sd >= 0".into()));
                }
                Ok(())
            }
            ModelSpec::Gp(s) => {
                s.kernel.validate()?;
                positive(s.noise_var, "noise variance")?;
                s.length_scales.iter().try_for_each(|&l| positive(l, "lengthscale"))
            }
            ModelSpec::Ensemble(s) | ModelSpec::EnsembleBoot(s) => self.ensemble_config(s).validate(),
            ModelSpec::EnsembleAnchored(s) => anchored_config(s).validate(),
            ModelSpec::Mcd(s) => {
                positive(s.noise_var, "noise variance")?;
                mcd_config(s).validate()
            }
            ModelSpec::Sngp(s) => s.validate(),
            ModelSpec::BnnHmc(s) => {
                s.mlp.validate()?;
                s.hmc.validate()
            }
        }
    }

    fn nlm_config(&self, s: &NlmSettings) -> NlmConfig {
        let mode = match self {
            ModelSpec::NlmMle(_) => TrainMode::Mle,
            ModelSpec::NlmMarginal(_) => TrainMode::Marginal,
            _ => TrainMode::Map,
        };
        NlmConfig {
            mlp: s.mlp.clone(),
            alpha: s.alpha,
            noise_var: s.noise_var,
            gamma: s.gamma,
            optimizer: s.optimizer.clone(),
            mode,
        }
    }

    fn ensemble_config(&self, s: &EnsembleSettings) -> EnsembleConfig {
        EnsembleConfig {
            members: s.members,
            variant: if matches!(self, ModelSpec::EnsembleBoot(_)) {
                EnsembleVariant::Bootstrap
            } else {
                EnsembleVariant::Vanilla
            },
            gamma: s.gamma,
            mlp: s.mlp.clone(),
            optimizer: s.optimizer.clone(),
        }
    }

    /// Train on (normalized) data. Every kind draws only from `stream`.
    pub fn train(&self, x: &Mat, y: &[f64], stream: &RngStream) -> Result<TrainedModel> {
        self.validate()?;
        if x.rows() == 0 {
            return Err(Error::EmptyInput("training rows"));
        }
        match self {
            ModelSpec::NlmMap(s) | ModelSpec::NlmMle(s) | ModelSpec::NlmMarginal(s) => {
                let net = train_nlm(x, y, &self.nlm_config(s), stream)?;
                Ok(TrainedModel::Neural(NeuralLinear::fit(net.params, x, y, s.alpha, s.noise_var)?))
            }
            ModelSpec::Luna(s) => {
                let params = if s.scale_grid.is_empty() {
                    train_luna(x, y, &s.config(), stream)?.model.params
                } else {
                    let order = stream.split(100).permutation(x.rows());
                    let n_val = ((x.rows() as f64 * s.validation_fraction).round() as usize).clamp(1, x.rows() - 1);
                    let (val, tr) = order.split_at(n_val);
                    let ty: Vec<f64> = tr.iter().map(|&i| y[i]).collect();
                    let vy: Vec<f64> = val.iter().map(|&i| y[i]).collect();
                    let (best, mut cands) = luna_search(&x.select_rows(tr), &ty, &x.select_rows(val), &vy, &s.config(), &s.scale_grid, stream)?;
                    cands.swap_remove(best).run.model.params
                };
                Ok(TrainedModel::Neural(NeuralLinear::fit(params, x, y, s.alpha, s.noise_var)?))
            }
            ModelSpec::Tuna(s) => {
                let inputs = make_reference_points(x, s.reference_sd, &mut stream.split(10))?;
                let reference = build_reference_set(&inputs, &ReferenceGenerator::GpPrior(s.reference_kernel.clone()), s.heads, &mut stream.split(11))?;
                let set = match &s.pseudo {
                    Some(p) => tuna_pseudo_augment(&reference, &Mat::from_rows(&p.inputs), &PseudoTargets::Broadcast(p.targets.clone()))?,
                    None => reference.clone(),
                };
                let run = train_tuna(&set, &s.mlp, &s.optimizer, stream)?;
                let alpha = match s.alpha {
                    Some(a) => a,
                    None => reference_prior_variance(&run.model.params, &reference)?,
                };
                Ok(TrainedModel::Neural(NeuralLinear::fit(run.model.params, x, y, alpha, s.noise_var)?))
            }
            ModelSpec::Gp(s) => {
                let kernel = if s.length_scales.is_empty() {
                    s.kernel.clone()
                } else {
                    let cands: Vec<KernelSpec> = s.length_scales.iter().map(|&l| s.kernel.with_length_scale(l)).collect();
                    gp_grid_search(x, y, &cands, s.noise_var)?.0
                };
                Ok(TrainedModel::Gp {
                    x: x.clone(),
                    y: y.to_vec(),
                    kernel,
                    noise_var: s.noise_var,
                })
            }
            ModelSpec::Ensemble(s) | ModelSpec::EnsembleBoot(s) => Ok(TrainedModel::Ensemble(train_ensemble(x, y, &self.ensemble_config(s), stream)?)),
            ModelSpec::EnsembleAnchored(s) => Ok(TrainedModel::Ensemble(train_ensemble(x, y, &anchored_config(s), stream)?)),
            ModelSpec::Mcd(s) => Ok(TrainedModel::Mcd {
                model: mcd_train(x, y, &mcd_config(s), stream)?,
                noise_var: s.noise_var,
                predict_seed: stream.split(20).next_u64(),
            }),
            ModelSpec::Sngp(s) => Ok(TrainedModel::Sngp(train_sngp(x, y, s, stream)?)),
            ModelSpec::BnnHmc(s) => {
                let trace = bnn_hmc_sample(&s.mlp, x, y, &s.hmc, stream)?;
                let samples: Vec<Vec<f64>> = trace.kept(s.hmc.burn_in, s.hmc.thinning).cloned().collect();
                Ok(TrainedModel::Bnn {
                    spec: s.mlp.clone(),
                    samples,
                    noise_var: s.hmc.noise_sd * s.hmc.noise_sd,
                })
            }
        }
    }
}

fn anchored_config(s: &AnchoredSettings) -> EnsembleConfig {
    EnsembleConfig {
        members: s.members,
        variant: EnsembleVariant::Anchored {
            init_var: s.init_var,
            prior_var: s.prior_var,
            noise_var: s.noise_var,
        },
        gamma: 0.0,
        mlp: s.mlp.clone(),
        optimizer: s.optimizer.clone(),
    }
}

fn mcd_config(s: &McdSettings) -> McdConfig {
    McdConfig {
        dropout: s.dropout,
        passes: s.passes,
        gamma: s.gamma,
        mlp: s.mlp.clone(),
        optimizer: s.optimizer.clone(),
    }
}

/// A trained model of any kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum TrainedModel {
    /// Learned features with a Bayesian linear head (NLM, LUNA, TUNA).
    Neural(NeuralLinear),
    /// Exact GP, stored as its training data and refit on load.
    Gp { x: Mat, y: Vec<f64>, kernel: KernelSpec, noise_var: f64 },
    Ensemble(Ensemble),
    /// MC dropout; prediction masks come from `predict_seed`, so repeated
    /// predictions are identical.
    Mcd { model: McdModel, noise_var: f64, predict_seed: u64 },
    Sngp(SngpModel),
    /// Kept HMC samples of the flattened network weights.
    Bnn { spec: MlpSpec, samples: Vec<Vec<f64>>, noise_var: f64 },
}

/// A ready-to-query model (a GP keeps its factorization).
pub enum Predictor<'a> {
    Model(&'a TrainedModel),
    Gp(GpPosterior),
}

impl TrainedModel {
    pub fn input_dim(&self) -> usize {
        match self {
            TrainedModel::Neural(m) => m.params.spec.input_dim,
            TrainedModel::Gp { x, .. } => x.cols(),
            TrainedModel::Ensemble(e) => e.members[0].spec.input_dim,
            TrainedModel::Mcd { model, .. } => model.params.spec.input_dim,
            TrainedModel::Sngp(m) => m.body.spec.input_dim,
            TrainedModel::Bnn { spec, .. } => spec.input_dim,
        }
    }

    pub fn predictor(&self) -> Result<Predictor<'_>> {
        match self {
            TrainedModel::Gp { x, y, kernel, noise_var } => Ok(Predictor::Gp(gp_fit(x, y, kernel, *noise_var)?)),
            other => Ok(Predictor::Model(other)),
        }
    }

    pub fn predict(&self, x: &Mat) -> Result<PredictiveDist> {
        self.predictor()?.predict(x)
    }
}

impl Predictor<'_> {
    /// Pure in `x`: safe to call concurrently on disjoint chunks.
    pub fn predict(&self, x: &Mat) -> Result<PredictiveDist> {
        let model = match self {
            Predictor::Gp(post) => return post.predict(x),
            Predictor::Model(m) => *m,
        };
        match model {
            TrainedModel::Neural(m) => m.predict(x),
            TrainedModel::Gp { .. } => unreachable!("GP predictors hold a posterior"),
            TrainedModel::Ensemble(e) => ensemble_predict(&e.members, x),
            TrainedModel::Mcd { model, noise_var, predict_seed } => mcd_predict(model, x, *noise_var, &mut RngStream::new(*predict_seed)),
            TrainedModel::Sngp(m) => m.predict(x),
            TrainedModel::Bnn { spec, samples, noise_var } => {
                if samples.is_empty() {
                    return Err(Error::EmptyInput("HMC samples"));
                }
                let preds: Vec<Vec<f64>> = samples.iter().map(|q| MlpParams::from_flat(spec, q).predict(x)).collect::<Result<_>>()?;
                let d = moments_across(&preds);
                Ok(PredictiveDist::from_epistemic(d.mean, d.epistemic_var, *noise_var))
            }
        }
    }
}
