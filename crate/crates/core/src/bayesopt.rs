//! Bayesian optimization: synthetic objectives, expected improvement, a
//! candidate-set acquisition step and the sequential loop over any surrogate.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::bench::{Dataset, NormStats};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::numkit::{mean, std_pop, Mat, RngStream};

/// Branin–Hoo: three global minima of 0.397887 on `[−5, 10] × [0, 15]`.
pub fn branin(x: &[f64]) -> f64 {
    use std::f64::consts::PI;
    let (x1, x2) = (x[0], x[1]);
    let b = 5.1 / (4.0 * PI * PI);
    let c = 5.0 / PI;
    let t = 1.0 / (8.0 * PI);
    (x2 - b * x1 * x1 + c * x1 - 6.0).powi(2) + 10.0 * (1.0 - t) * x1.cos() + 10.0
}

pub const BRANIN_MIN: f64 = 0.397887;

const HARTMANN_ALPHA: [f64; 4] = [1.0, 1.2, 3.0, 3.2];
const HARTMANN_A: [[f64; 6]; 4] = [
    [10.0, 3.0, 17.0, 3.5, 1.7, 8.0],
    [0.05, 10.0, 17.0, 0.1, 8.0, 14.0],
    [3.0, 3.5, 1.7, 10.0, 17.0, 8.0],
    [17.0, 8.0, 0.05, 10.0, 0.1, 14.0],
];
const HARTMANN_P: [[f64; 6]; 4] = [
    [1312.0, 1696.0, 5569.0, 124.0, 8283.0, 5886.0],
    [2329.0, 4135.0, 8307.0, 3736.0, 1004.0, 9991.0],
    [2348.0, 1451.0, 3522.0, 2883.0, 3047.0, 6650.0],
    [4047.0, 8828.0, 8732.0, 5743.0, 1091.0, 381.0],
];

/// Six-dimensional Hartmann function on `(0, 1)⁶`, minimum −3.32237.
pub fn hartmann6(x: &[f64]) -> f64 {
    -(0..4)
        .map(|i| {
            let inner: f64 = (0..6).map(|j| HARTMANN_A[i][j] * (x[j] - 1e-4 * HARTMANN_P[i][j]).powi(2)).sum();
            HARTMANN_ALPHA[i] * (-inner).exp()
        })
        .sum::<f64>()
}

pub const HARTMANN6_MIN: f64 = -3.32237;
pub const HARTMANN6_ARGMIN: [f64; 6] = [0.20169, 0.150011, 0.476874, 0.275332, 0.311652, 0.6573];

#[derive(Debug, Clone, Copy)]
pub struct ObjectiveSpec {
    pub name: &'static str,
    pub bounds: &'static [(f64, f64)],
    pub eval: fn(&[f64]) -> f64,
    pub optimum: Option<f64>,
}

impl ObjectiveSpec {
    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "branin" => Some(Self {
                name: "branin",
                bounds: &[(-5.0, 10.0), (0.0, 15.0)],
                eval: branin,
                optimum: Some(BRANIN_MIN),
            }),
            "hartmann6" => Some(Self {
                name: "hartmann6",
                bounds: &[(0.0, 1.0); 6],
                eval: hartmann6,
                optimum: Some(HARTMANN6_MIN),
            }),
            _ => None,
        }
    }
}

/// Expected improvement for minimization.
pub fn expected_improvement(mu: f64, sigma: f64, f_best: f64) -> f64 {
    let gain = f_best - mu;
    if sigma <= 0.0 {
        return gain.max(0.0);
    }
    let n = Normal::standard();
    let z = gain / sigma;
    (gain * n.cdf(z) + sigma * n.pdf(z)).max(0.0)
}

/// Uniform draw from the box, one row per candidate.
pub fn uniform_in_box(bounds: &[(f64, f64)], k: usize, stream: &mut RngStream) -> Mat {
    Mat::from_fn(k, bounds.len(), |_, j| {
        let (lo, hi) = bounds[j];
        lo + (hi - lo) * stream.next_uniform()
    })
}

/// Index of the maximum, first on ties.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Evaluate EI on `k` uniform candidates and return the best one.
/// `surrogate` maps candidate rows to predictive mean and std.
pub fn propose_next<F>(surrogate: F, bounds: &[(f64, f64)], k: usize, f_best: f64, stream: &mut RngStream) -> Result<Vec<f64>>
where
    F: Fn(&Mat) -> Result<(Vec<f64>, Vec<f64>)>,
{
    if k == 0 {
        return Err(Error::InvalidConfig("need at least one candidate".into()));
    }
    let cands = uniform_in_box(bounds, k, stream);
    let (mu, sd) = surrogate(&cands)?;
    let ei: Vec<f64> = mu.iter().zip(&sd).map(|(m, s)| expected_improvement(*m, *s, f_best)).collect();
    Ok(cands.row(argmax(&ei)).to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoConfig {
    pub init_points: usize,
    pub steps: usize,
    #[serde(default = "default_candidates")]
    pub candidates: usize,
}

fn default_candidates() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoResult {
    pub objective: String,
    pub surrogate: String,
    pub seed: u64,
    pub init_points: usize,
    pub queries: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    /// Running minimum of `f − f*` (of `f` without a known optimum).
    pub best_error: Vec<f64>,
    /// Set when a surrogate fit failed; the trace stops at that step.
    pub failure: Option<String>,
}

impl BoResult {
    pub fn final_error(&self) -> f64 {
        *self.best_error.last().unwrap_or(&f64::INFINITY)
    }

    /// `step, x0…, f, best_error` rows with a header; initial points have step 0.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let err = |e: csv::Error| Error::Io(e.to_string());
        let dim = self.queries.first().map_or(0, Vec::len);
        let mut head = vec!["step".to_string()];
        head.extend((0..dim).map(|j| format!("x{j}")));
        head.extend(["f".into(), "best_error".into()]);
        w.write_record(&head).map_err(err)?;
        for (i, q) in self.queries.iter().enumerate() {
            let step = i.saturating_sub(self.init_points - 1).to_string();
            let mut rec = vec![step];
            rec.extend(q.iter().map(|v| v.to_string()));
            rec.push(self.values[i].to_string());
            rec.push(self.best_error[i].to_string());
            w.write_record(&rec).map_err(err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn to_unit(bounds: &[(f64, f64)], x: &Mat) -> Mat {
    Mat::from_fn(x.rows(), x.cols(), |i, j| (x[(i, j)] - bounds[j].0) / (bounds[j].1 - bounds[j].0))
}

/// Initial points drawn from `stream.split(0)`; step `s` refits the surrogate
/// on all observations (inputs mapped to the unit cube, targets z-scored)
/// with `split(1).split(s)` and proposes with `split(2).split(s)`.
pub fn bayesopt_loop(objective: &ObjectiveSpec, surrogate: &ModelSpec, config: &BoConfig, seed: u64) -> Result<BoResult> {
    if config.init_points == 0 {
        return Err(Error::InvalidConfig("need at least one initial point".into()));
    }
    surrogate.validate()?;
    let stream = RngStream::new(seed);
    let init = uniform_in_box(objective.bounds, config.init_points, &mut stream.split(0));
    let mut result = BoResult {
        objective: objective.name.into(),
        surrogate: surrogate.kind().into(),
        seed,
        init_points: config.init_points,
        queries: Vec::new(),
        values: Vec::new(),
        best_error: Vec::new(),
        failure: None,
    };
    let offset = objective.optimum.unwrap_or(0.0);
    let record = |r: &mut BoResult, q: Vec<f64>| {
        let f = (objective.eval)(&q);
        let prev = r.best_error.last().copied().unwrap_or(f64::INFINITY);
        r.best_error.push(prev.min(f - offset));
        r.values.push(f);
        r.queries.push(q);
    };
    for i in 0..init.rows() {
        record(&mut result, init.row(i).to_vec());
    }
    let unit: Vec<(f64, f64)> = vec![(0.0, 1.0); objective.dim()];
    for s in 0..config.steps {
        let xs = to_unit(objective.bounds, &Mat::from_rows(&result.queries));
        let data = Dataset::new(xs, result.values.clone())?;
        let step = (|| -> Result<Vec<f64>> {
            // inputs already live on the unit cube; only targets are z-scored
            let sd = std_pop(&data.y);
            let stats = NormStats {
                x_mean: vec![0.0; data.dim()],
                x_sd: vec![1.0; data.dim()],
                y_mean: mean(&data.y),
                y_sd: if sd > 0.0 { sd } else { 1.0 },
                warnings: vec![],
            };
            let yn = stats.apply_y(&data.y);
            let model = surrogate.train(&data.x, &yn, &stream.split(1).split(s as u64))?;
            let predictor = model.predictor()?;
            let f_best = yn.iter().copied().fold(f64::INFINITY, f64::min);
            let u = propose_next(
                |c| predictor.predict(c).map(|d| (d.mean.clone(), d.epistemic_std())),
                &unit,
                config.candidates,
                f_best,
                &mut stream.split(2).split(s as u64),
            )?;
            Ok(u.iter().zip(objective.bounds).map(|(v, (lo, hi))| lo + (hi - lo) * v).collect())
        })();
        match step {
            Ok(q) => record(&mut result, q),
            Err(e) => {
                result.failure = Some(format!("step {s}: {e}"));
                break;
            }
        }
    }
    Ok(result)
}
