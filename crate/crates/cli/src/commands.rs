//! The experiment commands. Each one is a pure function of its resolved
//! config and input files; the manifest records both plus output digests.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use unalab::bayesopt::{bayesopt_loop, BoConfig, BoResult, ObjectiveSpec};
use unalab::bench::{
    denormalize_dist, epistemic_gap_ratio, gap_detection, gen_cubic_gap, gen_radial_shell_n, gen_squiggle, gen_squiggle_n, load_csv, normalize,
    rub_ideal_score, rub_run, shell_count, uci_gap_transform, write_csv, write_rub_csv, Dataset, GapDetection, NormStats, Region, RubConfig, RubReport,
    RubScore,
};
use unalab::blr::{avg_log_likelihood, rmse, PredictiveDist};
use unalab::model::{ModelSpec, TrainedModel};
use unalab::numkit::{mean, std_pop, Mat, RngStream};

use crate::config::default_out;
use crate::error::{as_config, config_err, CliError, CliResult};
use crate::manifest::{Outputs, RunManifest};
use crate::modelfile::ModelFile;
use crate::svg;
use crate::table::{prediction_csv, read_predictions, read_table};

pub const GENERATORS: [&str; 4] = ["cubic-gap", "squiggle", "radial-shell", "uci-gap"];

pub trait Command: Serialize + DeserializeOwned {
    const NAME: &'static str;
    fn seed(&self) -> Option<u64>;
    fn out(&self) -> &Path;
    fn set_out(&mut self, out: PathBuf);
    /// Checks that need no work beyond reading the config.
    fn check(&self) -> CliResult<()>;
    fn run(&self, outputs: &mut Outputs) -> CliResult<()>;
}

pub fn execute<C: Command>(config: &C) -> CliResult<RunManifest> {
    config.check()?;
    let started = Instant::now();
    let mut outputs = Outputs::create(config.out())?;
    config.run(&mut outputs)?;
    outputs.finish(C::NAME, config.seed(), serde_json::to_value(config)?, started)
}

fn yes() -> bool {
    true
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn csv_bytes(data: &Dataset) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    write_csv(data, &mut buf, true)?;
    Ok(buf)
}

fn json_bytes<T: Serialize>(value: &T) -> CliResult<Vec<u8>> {
    Ok((serde_json::to_string_pretty(value)? + "\n").into_bytes())
}

/// Read a dataset whose target defaults to the last column.
fn read_dataset(path: &Path, target: Option<usize>, header: bool) -> CliResult<Dataset> {
    let target = match target {
        Some(t) => t,
        None => crate::table::column_count(path, header)?.checked_sub(1).ok_or_else(|| config_err(format!("{}: no columns", path.display())))?,
    };
    load_csv(path, target, header).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn check_model_dim(model: &ModelSpec, dim: usize, what: &str) -> CliResult<()> {
    model.validate().map_err(as_config)?;
    match model.input_dim() {
        Some(d) if d != dim => Err(config_err(format!("model.mlp.input_dim is {d} but {what} has dimension {dim}"))),
        _ => Ok(()),
    }
}

// ---------------------------------------------------------------- dataset

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegionArg {
    Gap,
    #[default]
    NotGap,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub gen: String,
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Sample size for squiggle and radial-shell; the generator default when absent.
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default = "one")]
    pub dim: usize,
    #[serde(default)]
    pub region: RegionArg,
    /// Source CSV for uci-gap.
    #[serde(default)]
    pub input: Option<PathBuf>,
    /// Feature column (0-based, among features) that defines the uci-gap split.
    #[serde(default)]
    pub feature: Option<usize>,
    /// Target column of `input`; last column when absent.
    #[serde(default)]
    pub target: Option<usize>,
    /// Whether `input` has a header row.
    #[serde(default)]
    pub header: bool,
}

fn one() -> usize {
    1
}

impl Command for DatasetConfig {
    const NAME: &'static str = "dataset";

    fn seed(&self) -> Option<u64> {
        Some(self.seed)
    }
    fn out(&self) -> &Path {
        &self.out
    }
    fn set_out(&mut self, out: PathBuf) {
        self.out = out;
    }

    fn check(&self) -> CliResult<()> {
        if !GENERATORS.contains(&self.gen.as_str()) {
            return Err(config_err(format!("--gen: unknown generator {:?} (expected one of {})", self.gen, GENERATORS.join(", "))));
        }
        if self.n.is_some() && !matches!(self.gen.as_str(), "squiggle" | "radial-shell") {
            return Err(config_err(format!("--n: generator {} has a fixed sample size", self.gen)));
        }
        if self.gen == "radial-shell" && self.n.is_none() && shell_count(self.dim).is_none() {
            return Err(config_err(format!("--n: no default shell sample count for --dim {}", self.dim)));
        }
        if self.gen == "uci-gap" && (self.input.is_none() || self.feature.is_none()) {
            return Err(config_err("uci-gap needs --in and --feature"));
        }
        Ok(())
    }

    fn run(&self, outputs: &mut Outputs) -> CliResult<()> {
        let mut stream = RngStream::new(self.seed).split(0);
        let region = match self.region {
            RegionArg::Gap => Region::Gap,
            RegionArg::NotGap => Region::NotGap,
        };
        match self.gen.as_str() {
            "cubic-gap" => outputs.write("dataset.csv", &csv_bytes(&gen_cubic_gap(&mut stream))?),
            "squiggle" => {
                let data = match self.n {
                    Some(n) => gen_squiggle_n(region, n, &mut stream),
                    None => gen_squiggle(region, &mut stream),
                };
                outputs.write("dataset.csv", &csv_bytes(&data)?)
            }
            "radial-shell" => {
                let n = self.n.or_else(|| shell_count(self.dim)).unwrap();
                let data = gen_radial_shell_n(self.dim, n, &mut stream).map_err(as_config)?;
                outputs.write("dataset.csv", &csv_bytes(&data)?)
            }
            _ => {
                let input = self.input.as_deref().unwrap();
                outputs.input(input);
                let data = read_dataset(input, self.target, self.header)?;
                let split = uci_gap_transform(&data, self.feature.unwrap()).map_err(|e| config_err(format!("--feature: {e}")))?;
                outputs.write("train.csv", &csv_bytes(&split.train)?)?;
                outputs.write("gap.csv", &csv_bytes(&split.gap)?)
            }
        }
    }
}

// ---------------------------------------------------------------- train / predict

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub data: PathBuf,
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub target: Option<usize>,
    #[serde(default = "yes")]
    pub header: bool,
    /// Inputs to predict at (features, optionally with the target column);
    /// the training inputs when absent.
    #[serde(default)]
    pub predict: Option<PathBuf>,
    /// z-score inputs and targets before training.
    #[serde(default = "yes")]
    pub normalize: bool,
    pub model: ModelSpec,
}

/// Feature matrix from a file holding `dim` features, optionally plus a target column.
fn read_inputs(path: &Path, dim: usize, target: Option<usize>, header: bool) -> CliResult<Mat> {
    let table = read_table(path, header)?;
    let v = table.values;
    if v.cols() == dim {
        return Ok(v);
    }
    if v.cols() != dim + 1 {
        return Err(config_err(format!("{}: expected {dim} or {} columns, found {}", path.display(), dim + 1, v.cols())));
    }
    let t = target.unwrap_or(dim);
    if t > dim {
        return Err(config_err(format!("--target {t} out of range for {} columns", dim + 1)));
    }
    let keep: Vec<usize> = (0..=dim).filter(|&j| j != t).collect();
    Ok(Mat::from_fn(v.rows(), dim, |i, j| v[(i, keep[j])]))
}

fn predict_raw(model: &TrainedModel, stats: Option<&NormStats>, x: &Mat) -> CliResult<PredictiveDist> {
    Ok(match stats {
        Some(s) => denormalize_dist(&model.predict(&s.apply_x(x)?)?, s),
        None => model.predict(x)?,
    })
}

impl Command for TrainConfig {
    const NAME: &'static str = "train";

    fn seed(&self) -> Option<u64> {
        Some(self.seed)
    }
    fn out(&self) -> &Path {
        &self.out
    }
    fn set_out(&mut self, out: PathBuf) {
        self.out = out;
    }

    fn check(&self) -> CliResult<()> {
        self.model.validate().map_err(as_config)
    }

    fn run(&self, outputs: &mut Outputs) -> CliResult<()> {
        outputs.input(&self.data);
        let data = read_dataset(&self.data, self.target, self.header)?;
        check_model_dim(&self.model, data.dim(), "--data")?;
        let query = match &self.predict {
            Some(p) => {
                outputs.input(p);
                read_inputs(p, data.dim(), self.target, self.header)?
            }
            None => data.x.clone(),
        };
        let (train_data, stats) = if self.normalize {
            let (d, s) = normalize(&data)?;
            for w in &s.warnings {
                eprintln!("warning: {w}");
            }
            (d, Some(s))
        } else {
            (data, None)
        };
        let model = self.model.train(&train_data.x, &train_data.y, &RngStream::new(self.seed))?;
        let dist = predict_raw(&model, stats.as_ref(), &query)?;
        let file = ModelFile::new(self.model.clone(), stats, model);
        outputs.write("model.json", file.to_json()?.as_bytes())?;
        outputs.write("predictions.csv", &prediction_csv(&query, &dist)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictConfig {
    pub model_file: PathBuf,
    pub data: PathBuf,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub target: Option<usize>,
    #[serde(default = "yes")]
    pub header: bool,
}

impl Command for PredictConfig {
    const NAME: &'static str = "predict";

    fn seed(&self) -> Option<u64> {
        None
    }
    fn out(&self) -> &Path {
        &self.out
    }
    fn set_out(&mut self, out: PathBuf) {
        self.out = out;
    }
    fn check(&self) -> CliResult<()> {
        Ok(())
    }

    fn run(&self, outputs: &mut Outputs) -> CliResult<()> {
        outputs.input(&self.model_file);
        outputs.input(&self.data);
        let file = ModelFile::read(&self.model_file)?;
        let x = read_inputs(&self.data, file.input_dim, self.target, self.header)?;
        let dist = predict_raw(&file.model, file.stats.as_ref(), &x)?;
        outputs.write("predictions.csv", &prediction_csv(&x, &dist)?)
    }
}

// ---------------------------------------------------------------- rub

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RubRunConfig {
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Shell sample count; 50/200/500 for D = 1/2/3 when absent.
    #[serde(default)]
    pub n: Option<usize>,
    pub rub: RubConfig,
    pub model: ModelSpec,
}

#[derive(Serialize)]
struct RubSummary<'a> {
    samples: usize,
    score: RubScore,
    report: &'a RubReport,
}

impl Command for RubRunConfig {
    const NAME: &'static str = "rub";

    fn seed(&self) -> Option<u64> {
        Some(self.seed)
    }
    fn out(&self) -> &Path {
        &self.out
    }
    fn set_out(&mut self, out: PathBuf) {
        self.out = out;
    }

    fn check(&self) -> CliResult<()> {
        self.rub.validate().map_err(|e| config_err(format!("rub: {e}")))?;
        if self.n.is_none() && shell_count(self.rub.dim).is_none() {
            return Err(config_err(format!("--n: no default shell sample count for --dim {}", self.rub.dim)));
        }
        check_model_dim(&self.model, self.rub.dim, "--dim")
    }

    fn run(&self, outputs: &mut Outputs) -> CliResult<()> {
        let stream = RngStream::new(self.seed);
        let n = self.n.or_else(|| shell_count(self.rub.dim)).unwrap();
        let data = gen_radial_shell_n(self.rub.dim, n, &mut stream.split(0))?;
        let (norm, stats) = normalize(&data)?;
        let model = self.model.train(&norm.x, &norm.y, &stream.split(1))?;
        // Rays live in raw input space; uncertainty stays on the normalized target scale.
        let report = rub_run(|x| model.predict(&stats.apply_x(x)?), &self.rub, &mut stream.split(2))?;
        let score = rub_ideal_score(&report, self.rub.dim);
        outputs.write("shell.csv", &csv_bytes(&data)?)?;
        let mut csv = Vec::new();
        write_rub_csv(&report, &mut csv)?;
        outputs.write("rub.csv", &csv)?;
        outputs.write(
            "rub.json",
            &json_bytes(&RubSummary {
                samples: n,
                score,
                report: &report,
            })?,
        )?;
        let title = format!("{} on the {}-D radial shell", self.model.kind(), self.rub.dim);
        let plot = svg::render(&svg::Profile {
            title: &title,
            x: &report.radii,
            mean: &report.mean_std,
            spread: &report.std_std,
            ideal: score.ideal,
        });
        outputs.write("rub.svg", plot.as_bytes())
    }
}

// ---------------------------------------------------------------- bayesopt

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BayesoptConfig {
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub objective: String,
    #[serde(default = "default_init_points")]
    pub init_points: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_candidates")]
    pub candidates: usize,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    pub model: ModelSpec,
}

fn default_init_points() -> usize {
    5
}
fn default_steps() -> usize {
    50
}
fn default_candidates() -> usize {
    2000
}
fn default_restarts() -> usize {
    5
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct BoSummary {
    pub surrogate: String,
    pub objective: String,
    pub mean_final_error: f64,
    /// Population std over restarts.
    pub std_final_error: f64,
    pub restarts: usize,
    pub final_errors: Vec<f64>,
    pub failures: Vec<Option<String>>,
}

/// Seed of restart `r`, derived from the master seed.
pub fn restart_seed(seed: u64, r: usize) -> u64 {
    RngStream::new(seed).split(r as u64).next_u64()
}

impl Command for BayesoptConfig {
    const NAME: &'static str = "bayesopt";

    fn seed(&self) -> Option<u64> {
        Some(self.seed)
    }
    fn out(&self) -> &Path {
        &self.out
    }
    fn set_out(&mut self, out: PathBuf) {
        self.out = out;
    }

    fn check(&self) -> CliResult<()> {
        let objective = ObjectiveSpec::by_name(&self.objective)
            .ok_or_else(|| config_err(format!("--objective: unknown objective {:?} (expected branin or hartmann6)", self.objective)))?;
        if self.restarts == 0 || self.init_points == 0 || self.candidates == 0 {
            return Err(config_err("restarts, init_points and candidates must be >= 1"));
        }
        check_model_dim(&self.model, objective.dim(), "the objective")
    }

    fn run(&self, outputs: &mut Outputs) -> CliResult<()> {
        let objective = ObjectiveSpec::by_name(&self.objective).unwrap();
        let config = BoConfig {
            init_points: self.init_points,
            steps: self.steps,
            candidates: self.candidates,
        };
        let results: Vec<BoResult> = (0..self.restarts)
            .into_par_iter()
            .map(|r| bayesopt_loop(&objective, &self.model, &config, restart_seed(self.seed, r)))
            .collect::<unalab::Result<_>>()?;
        for (r, res) in results.iter().enumerate() {
            let mut buf = Vec::new();
            res.write_csv(&mut buf)?;
            outputs.write(&format!("restart_{r:03}.csv"), &buf)?;
        }
        let finals: Vec<f64> = results.iter().map(BoResult::final_error).collect();
        let summary = BoSummary {
            surrogate: self.model.kind().into(),
            objective: self.objective.clone(),
            mean_final_error: mean(&finals),
            std_final_error: std_pop(&finals),
            restarts: self.restarts,
            final_errors: finals,
            failures: results.iter().map(|r| r.failure.clone()).collect(),
        };
        println!(
            "{} / {}: final error {:.4} ± {:.4} over {} restarts",
            summary.surrogate, summary.objective, summary.mean_final_error, summary.std_final_error, summary.restarts
        );
        outputs.write("summary.json", &json_bytes(&summary)?)
    }
}

// ---------------------------------------------------------------- report

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRun {
    pub gap: PathBuf,
    pub not_gap: PathBuf,
    /// Datasets (target last) matching the prediction rows, for RMSE / LL.
    #[serde(default)]
    pub gap_data: Option<PathBuf>,
    #[serde(default)]
    pub not_gap_data: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub runs: Vec<ReportRun>,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq)]
pub struct Metrics {
    pub rmse: f64,
    pub avg_ll: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReportRow {
    pub gap_epistemic: f64,
    pub not_gap_epistemic: f64,
    /// Percent increase of mean gap epistemic std over not-gap.
    pub ratio_pct: f64,
    pub gap: Option<Metrics>,
    pub not_gap: Option<Metrics>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ReportSummary {
    pub rows: Vec<ReportRow>,
    pub detection: GapDetection,
}

fn metrics(pred: &PredictiveDist, x: &Mat, data: Option<&Path>) -> CliResult<Option<Metrics>> {
    let Some(path) = data else { return Ok(None) };
    let d = read_dataset(path, None, true)?;
    if d.len() != pred.len() || d.dim() != x.cols() {
        return Err(config_err(format!(
            "{}: {} rows × {} features does not match the prediction file ({} rows × {} features)",
            path.display(),
            d.len(),
            d.dim(),
            pred.len(),
            x.cols()
        )));
    }
    Ok(Some(Metrics {
        rmse: rmse(pred, &d.y)?,
        avg_ll: avg_log_likelihood(pred, &d.y)?,
    }))
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl Command for ReportConfig {
    const NAME: &'static str = "report";

    fn seed(&self) -> Option<u64> {
        None
    }
    fn out(&self) -> &Path {
        &self.out
    }
    fn set_out(&mut self, out: PathBuf) {
        self.out = out;
    }

    fn check(&self) -> CliResult<()> {
        if self.runs.is_empty() {
            return Err(config_err("report needs at least one --gap/--not-gap pair"));
        }
        Ok(())
    }

    fn run(&self, outputs: &mut Outputs) -> CliResult<()> {
        let mut rows = Vec::with_capacity(self.runs.len());
        for run in &self.runs {
            for p in [Some(&run.gap), Some(&run.not_gap), run.gap_data.as_ref(), run.not_gap_data.as_ref()].into_iter().flatten() {
                outputs.input(p);
            }
            let gap = read_predictions(&run.gap)?;
            let not_gap = read_predictions(&run.not_gap)?;
            if gap.x.cols() != not_gap.x.cols() {
                return Err(config_err(format!(
                    "{} and {} have different input dimensions ({} vs {})",
                    run.gap.display(),
                    run.not_gap.display(),
                    gap.x.cols(),
                    not_gap.x.cols()
                )));
            }
            rows.push(ReportRow {
                gap_epistemic: mean(&gap.dist.epistemic_std()),
                not_gap_epistemic: mean(&not_gap.dist.epistemic_std()),
                ratio_pct: epistemic_gap_ratio(&gap.dist, &not_gap.dist)?,
                gap: metrics(&gap.dist, &gap.x, run.gap_data.as_deref())?,
                not_gap: metrics(&not_gap.dist, &not_gap.x, run.not_gap_data.as_deref())?,
            });
        }
        let ratios: Vec<f64> = rows.iter().map(|r| r.ratio_pct).collect();
        let detection = gap_detection(&ratios)?;

        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "run",
            "gap_epistemic",
            "not_gap_epistemic",
            "ratio_pct",
            "gap_rmse",
            "gap_avg_ll",
            "not_gap_rmse",
            "not_gap_avg_ll",
        ])
        .map_err(runtime)?;
        for (i, r) in rows.iter().enumerate() {
            w.write_record([
                i.to_string(),
                r.gap_epistemic.to_string(),
                r.not_gap_epistemic.to_string(),
                r.ratio_pct.to_string(),
                cell(r.gap.map(|m| m.rmse)),
                cell(r.gap.map(|m| m.avg_ll)),
                cell(r.not_gap.map(|m| m.rmse)),
                cell(r.not_gap.map(|m| m.avg_ll)),
            ])
            .map_err(runtime)?;
        }
        outputs.write("report.csv", &w.into_inner().map_err(runtime)?)?;
        println!(
            "epistemic gap/not-gap increase: {:.1}% ± {:.1}% over {} runs; detected: {}",
            detection.mean,
            detection.std,
            rows.len(),
            if detection.detected { "yes" } else { "no" }
        );
        outputs.write("summary.json", &json_bytes(&ReportSummary { rows, detection })?)
    }
}

// ---------------------------------------------------------------- replay

/// Re-run a manifest's command and compare output digests.
pub fn replay(manifest: &RunManifest, out: Option<PathBuf>) -> CliResult<(RunManifest, Vec<String>)> {
    fn go<C: Command>(config: &serde_json::Value, out: Option<PathBuf>) -> CliResult<RunManifest> {
        let mut c: C = serde_json::from_value(config.clone()).map_err(|e| config_err(format!("manifest config: {e}")))?;
        if let Some(o) = out {
            c.set_out(o);
        }
        execute(&c)
    }
    let fresh = match manifest.command.as_str() {
        "dataset" => go::<DatasetConfig>(&manifest.config, out)?,
        "train" => go::<TrainConfig>(&manifest.config, out)?,
        "predict" => go::<PredictConfig>(&manifest.config, out)?,
        "rub" => go::<RubRunConfig>(&manifest.config, out)?,
        "bayesopt" => go::<BayesoptConfig>(&manifest.config, out)?,
        "report" => go::<ReportConfig>(&manifest.config, out)?,
        other => return Err(config_err(format!("manifest names unknown command {other:?}"))),
    };
    let mut mismatches = Vec::new();
    for (name, digest) in &manifest.outputs {
        match fresh.outputs.get(name) {
            Some(d) if d == digest => {}
            Some(_) => mismatches.push(format!("{name}: digest differs")),
            None => mismatches.push(format!("{name}: not produced")),
        }
    }
    for name in fresh.outputs.keys() {
        if !manifest.outputs.contains_key(name) {
            mismatches.push(format!("{name}: not in the original manifest"));
        }
    }
    Ok((fresh, mismatches))
}
