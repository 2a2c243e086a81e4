//! `unalab`: deterministic experiment driver.
//!
//! Every command resolves a JSON config (file, then flags on top), rejects
//! unknown keys, runs, and writes its outputs plus `manifest.json` into
//! `--out`. Exit codes: 0 success, 1 runtime failure, 2 configuration error.

mod commands;
mod config;
mod error;
mod manifest;
mod modelfile;
mod svg;
mod table;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use unalab::bayesopt::ObjectiveSpec;
use unalab::model::ModelSpec;

use commands::{execute, BayesoptConfig, Command, DatasetConfig, PredictConfig, ReportConfig, ReportRun, RubRunConfig, TrainConfig};
use config::Overrides;
use error::{as_config, config_err, CliError, CliResult};

#[derive(Parser)]
#[command(name = "unalab", version, about = "Uncertainty-aware neural linear model experiments")]
struct Cli {
    /// Worker threads for parallel restarts and ensemble members; outputs do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON config; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    /// Model config JSON (a ModelSpec with a "kind" tag).
    #[arg(long, conflicts_with = "kind")]
    model: Option<PathBuf>,
    /// Use the built-in template for this model kind.
    #[arg(long)]
    kind: Option<String>,
}

impl ModelArgs {
    fn apply(&self, o: &mut Overrides, dim: impl FnOnce() -> CliResult<usize>) -> CliResult<()> {
        o.set_file("model", self.model.as_deref(), "--model")?;
        if let Some(kind) = &self.kind {
            let spec = ModelSpec::template(kind, dim()?).map_err(|e| config_err(format!("--kind: {e}")))?;
            o.set(&["model"], Some(spec));
        }
        Ok(())
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a benchmark dataset, or split a CSV into train and gap parts.
    Dataset {
        #[command(flatten)]
        common: Common,
        /// cubic-gap, squiggle, radial-shell or uci-gap.
        #[arg(long)]
        gen: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long, value_parser = ["gap", "not-gap"])]
        region: Option<String>,
        /// Source CSV for uci-gap.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        feature: Option<usize>,
        #[arg(long)]
        target: Option<usize>,
        /// The source CSV has a header row.
        #[arg(long)]
        header: bool,
    },
    /// Print a starting model config for a kind.
    Template {
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 1)]
        dim: usize,
    },
    /// Train a model on a CSV and write model.json and predictions.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        target: Option<usize>,
        #[arg(long)]
        no_header: bool,
        /// Inputs to predict at instead of the training inputs.
        #[arg(long)]
        predict: Option<PathBuf>,
        /// Train on raw rather than z-scored data.
        #[arg(long)]
        no_normalize: bool,
    },
    /// Predict with a saved model.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model_file: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        target: Option<usize>,
        #[arg(long)]
        no_header: bool,
    },
    /// Radial uncertainty benchmark: train on the shell, profile along rays.
    Rub {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        rays: Option<usize>,
        #[arg(long)]
        r_max: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        /// epistemic or total.
        #[arg(long = "uncertainty")]
        uncertainty: Option<String>,
    },
    /// Bayesian optimization with restarts.
    Bayesopt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        seed: Option<u64>,
        /// branin or hartmann6.
        #[arg(long)]
        objective: Option<String>,
        #[arg(long)]
        init_points: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        candidates: Option<usize>,
        #[arg(long)]
        restarts: Option<usize>,
    },
    /// Gap / not-gap epistemic ratio table from prediction CSVs.
    Report {
        #[command(flatten)]
        common: Common,
        /// Gap-split prediction CSV; repeat once per run.
        #[arg(long)]
        gap: Vec<PathBuf>,
        /// Not-gap prediction CSV, paired with --gap by position.
        #[arg(long)]
        not_gap: Vec<PathBuf>,
        /// Gap-split dataset for RMSE and log likelihood, paired by position.
        #[arg(long)]
        gap_data: Vec<PathBuf>,
        #[arg(long)]
        not_gap_data: Vec<PathBuf>,
    },
    /// Re-run a manifest and compare output digests.
    Replay {
        manifest: PathBuf,
        /// Write the fresh outputs here instead of the original directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn base(common: &Common) -> CliResult<Overrides> {
    let mut o = Overrides::from_file(common.config.as_deref())?;
    o.set(&["out"], common.out.as_ref());
    Ok(o)
}

fn run_command<C: Command>(o: Overrides) -> CliResult<()> {
    let config: C = o.resolve()?;
    let manifest = execute(&config)?;
    eprintln!("{}: wrote {} files to {}", C::NAME, manifest.outputs.len(), config.out().display());
    Ok(())
}

fn data_dim(path: Option<&Path>, no_header: bool) -> CliResult<usize> {
    let path = path.ok_or_else(|| config_err("--kind with train needs --data on the command line"))?;
    table::column_count(path, !no_header)?
        .checked_sub(1)
        .filter(|d| *d > 0)
        .ok_or_else(|| config_err(format!("--data {}: need at least one feature and a target", path.display())))
}

fn paired(gap: &[PathBuf], other: &[PathBuf], flag: &str) -> CliResult<()> {
    if !other.is_empty() && other.len() != gap.len() {
        return Err(config_err(format!("{flag} given {} times but --gap {} times", other.len(), gap.len())));
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(config_err("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    match cli.command {
        Cmd::Dataset {
            common,
            gen,
            seed,
            n,
            dim,
            region,
            input,
            feature,
            target,
            header,
        } => {
            let mut o = base(&common)?;
            o.set(&["gen"], gen);
            o.set(&["seed"], seed);
            o.seed_fallback()?;
            o.set(&["n"], n);
            o.set(&["dim"], dim);
            o.set(&["region"], region);
            o.set(&["input"], input);
            o.set(&["feature"], feature);
            o.set(&["target"], target);
            o.set(&["header"], header.then_some(true));
            run_command::<DatasetConfig>(o)
        }
        Cmd::Template { kind, dim } => {
            let spec = ModelSpec::template(&kind, dim).map_err(as_config)?;
            println!("{}", serde_json::to_string_pretty(&spec)?);
            Ok(())
        }
        Cmd::Train {
            common,
            model,
            data,
            seed,
            target,
            no_header,
            predict,
            no_normalize,
        } => {
            let mut o = base(&common)?;
            model.apply(&mut o, || data_dim(data.as_deref(), no_header))?;
            o.set(&["data"], data);
            o.set(&["seed"], seed);
            o.seed_fallback()?;
            o.set(&["target"], target);
            o.set(&["header"], no_header.then_some(false));
            o.set(&["predict"], predict);
            o.set(&["normalize"], no_normalize.then_some(false));
            run_command::<TrainConfig>(o)
        }
        Cmd::Predict {
            common,
            model_file,
            data,
            target,
            no_header,
        } => {
            let mut o = base(&common)?;
            o.set(&["model_file"], model_file);
            o.set(&["data"], data);
            o.set(&["target"], target);
            o.set(&["header"], no_header.then_some(false));
            run_command::<PredictConfig>(o)
        }
        Cmd::Rub {
            common,
            model,
            seed,
            dim,
            n,
            rays,
            r_max,
            steps,
            uncertainty,
        } => {
            let mut o = base(&common)?;
            model.apply(&mut o, || dim.ok_or_else(|| config_err("--kind with rub needs --dim")))?;
            o.set(&["seed"], seed);
            o.seed_fallback()?;
            o.set(&["n"], n);
            o.set(&["rub", "dim"], dim);
            o.set(&["rub", "rays"], rays);
            o.set(&["rub", "r_max"], r_max);
            o.set(&["rub", "steps"], steps);
            o.set(&["rub", "kind"], uncertainty);
            run_command::<RubRunConfig>(o)
        }
        Cmd::Bayesopt {
            common,
            model,
            seed,
            objective,
            init_points,
            steps,
            candidates,
            restarts,
        } => {
            let mut o = base(&common)?;
            model.apply(&mut o, || {
                let name = objective.as_deref().ok_or_else(|| config_err("--kind with bayesopt needs --objective"))?;
                ObjectiveSpec::by_name(name).map(|s| s.dim()).ok_or_else(|| config_err(format!("--objective: unknown objective {name:?}")))
            })?;
            o.set(&["seed"], seed);
            o.seed_fallback()?;
            o.set(&["objective"], objective);
            o.set(&["init_points"], init_points);
            o.set(&["steps"], steps);
            o.set(&["candidates"], candidates);
            o.set(&["restarts"], restarts);
            run_command::<BayesoptConfig>(o)
        }
        Cmd::Report {
            common,
            gap,
            not_gap,
            gap_data,
            not_gap_data,
        } => {
            let mut o = base(&common)?;
            if !gap.is_empty() || !not_gap.is_empty() {
                if gap.len() != not_gap.len() {
                    return Err(config_err(format!("--gap given {} times but --not-gap {} times", gap.len(), not_gap.len())));
                }
                paired(&gap, &gap_data, "--gap-data")?;
                paired(&gap, &not_gap_data, "--not-gap-data")?;
                let runs: Vec<ReportRun> = (0..gap.len())
                    .map(|i| ReportRun {
                        gap: gap[i].clone(),
                        not_gap: not_gap[i].clone(),
                        gap_data: gap_data.get(i).cloned(),
                        not_gap_data: not_gap_data.get(i).cloned(),
                    })
                    .collect();
                o.set(&["runs"], Some(runs));
            }
            run_command::<ReportConfig>(o)
        }
        Cmd::Replay { manifest, out } => {
            let original = manifest::read_manifest(&manifest)?;
            let (_, mismatches) = commands::replay(&original, out)?;
            if mismatches.is_empty() {
                eprintln!("replay: {} outputs reproduced", original.outputs.len());
                Ok(())
            } else {
                Err(CliError::Runtime(format!("replay mismatch:\n  {}", mismatches.join("\n  "))))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("unalab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

