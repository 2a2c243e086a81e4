//! Datasets (synthetic generators and CSV ingestion), normalization, the
//! UCI-gap split, the radial uncertainty benchmark (RUB), the gap-transfer
//! protocol and epistemic gap-detection metrics.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blr::{avg_log_likelihood, fit_blr, PredictiveDist};
use crate::error::{ensure_dim, ensure_finite, Error, Result};
use crate::net::MlpParams;
use crate::numkit::{mean, norm2, percentile, std_pop, Mat, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// `N × D`.
    pub x: Mat,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(x: Mat, y: Vec<f64>) -> Result<Self> {
        ensure_dim("dataset targets", x.rows(), y.len())?;
        ensure_finite(x.as_slice(), "dataset inputs")?;
        ensure_finite(&y, "dataset targets")?;
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(rows),
            y: rows.iter().map(|&i| self.y[i]).collect(),
        }
    }

    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        ensure_dim("dataset dimension", self.dim(), other.dim())?;
        let mut y = self.y.clone();
        y.extend_from_slice(&other.y);
        Ok(Dataset {
            x: self.x.vstack(&other.x),
            y,
        })
    }
}

// ---------------------------------------------------------------- generators

pub const GENERATOR_NOISE_SD: f64 = 3.0;

pub fn cubic(x: f64) -> f64 {
    x * x * x
}

/// `x³ + 20·exp(−x²)·sin(10x)`.
pub fn squiggle(x: f64) -> f64 {
    x * x * x + 20.0 * (-x * x).exp() * (10.0 * x).sin()
}

/// `n/2` points from `U[−4, −2]` then `n − n/2` from `U[2, 4]`.
fn two_band_inputs(n: usize, stream: &mut RngStream) -> Vec<f64> {
    let mut xs = stream.uniform(-4.0, -2.0, n / 2);
    xs.extend(stream.uniform(2.0, 4.0, n - n / 2));
    xs
}

fn with_noise(xs: Vec<f64>, f: fn(f64) -> f64, sd: f64, stream: &mut RngStream) -> Dataset {
    let y = xs.iter().map(|&x| f(x) + sd * stream.next_normal()).collect();
    Dataset {
        x: Mat::column(&xs),
        y,
    }
}

/// 100 points, 50 per band, `y = x³ + N(0, 3²)`.
pub fn gen_cubic_gap(stream: &mut RngStream) -> Dataset {
    let xs = two_band_inputs(100, stream);
    with_noise(xs, cubic, GENERATOR_NOISE_SD, stream)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    /// `[−4, −2] ∪ [2, 4]`, split evenly.
    NotGap,
    /// `[−2, 2]`.
    Gap,
}

/// `n` points of the squiggle function with `N(0, 3²)` noise.
pub fn gen_squiggle_n(region: Region, n: usize, stream: &mut RngStream) -> Dataset {
    let xs = match region {
        Region::NotGap => two_band_inputs(n, stream),
        Region::Gap => stream.uniform(-2.0, 2.0, n),
    };
    with_noise(xs, squiggle, GENERATOR_NOISE_SD, stream)
}

pub fn gen_squiggle(region: Region, stream: &mut RngStream) -> Dataset {
    gen_squiggle_n(region, 100, stream)
}

pub const SHELL_NOISE_VAR: f64 = 1e-5;

/// Default shell sample count: 50, 200, 500 for `D` = 1, 2, 3.
pub fn shell_count(dim: usize) -> Option<usize> {
    match dim {
        1 => Some(50),
        2 => Some(200),
        3 => Some(500),
        _ => None,
    }
}

/// Uniform draw from `[−2, 2]^D`, accepted iff `1 ≤ ‖x‖ ≤ 2`.
pub fn shell_point(dim: usize, stream: &mut RngStream) -> Vec<f64> {
    loop {
        let p = stream.uniform(-2.0, 2.0, dim);
        let r = norm2(&p);
        if (1.0..=2.0).contains(&r) {
            return p;
        }
    }
}

/// `n` shell points with `y = ‖x‖ + N(0, 10⁻⁵)`.
pub fn gen_radial_shell_n(dim: usize, n: usize, stream: &mut RngStream) -> Result<Dataset> {
    if dim == 0 {
        return Err(Error::InvalidConfig("shell dimension must be >= 1".into()));
    }
    let mut data = Vec::with_capacity(n * dim);
    let mut y = Vec::with_capacity(n);
    let sd = SHELL_NOISE_VAR.sqrt();
    for _ in 0..n {
        let p = shell_point(dim, stream);
        y.push(norm2(&p) + sd * stream.next_normal());
        data.extend(p);
    }
    Ok(Dataset {
        x: Mat::from_vec(n, dim, data),
        y,
    })
}

pub fn gen_radial_shell(dim: usize, stream: &mut RngStream) -> Result<Dataset> {
    let n = shell_count(dim).ok_or_else(|| Error::InvalidConfig(format!("no default shell sample count for D = {dim}; pass one explicitly")))?;
    gen_radial_shell_n(dim, n, stream)
}

// ---------------------------------------------------------------- normalization

/// z-score statistics. Zero-variance feature columns keep mean 0 and sd 1,
/// so they pass through untouched; each such column is noted in `warnings`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub x_mean: Vec<f64>,
    pub x_sd: Vec<f64>,
    pub y_mean: f64,
    pub y_sd: f64,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl NormStats {
    pub fn fit(data: &Dataset) -> Result<Self> {
        if data.len() < 2 {
            return Err(Error::InvalidConfig("normalization needs at least 2 rows".into()));
        }
        let mut warnings = Vec::new();
        let mut x_mean = Vec::with_capacity(data.dim());
        let mut x_sd = Vec::with_capacity(data.dim());
        for j in 0..data.dim() {
            let col = data.x.col(j);
            let sd = std_pop(&col);
            if sd > 0.0 {
                x_mean.push(mean(&col));
                x_sd.push(sd);
            } else {
                warnings.push(format!("feature column {j} has zero variance; left unscaled"));
                x_mean.push(0.0);
                x_sd.push(1.0);
            }
        }
        let (mut y_mean, mut y_sd) = (mean(&data.y), std_pop(&data.y));
        if y_sd <= 0.0 {
            warnings.push("target has zero variance; left unscaled".into());
            y_mean = 0.0;
            y_sd = 1.0;
        }
        Ok(Self {
            x_mean,
            x_sd,
            y_mean,
            y_sd,
            warnings,
        })
    }

    pub fn apply_x(&self, x: &Mat) -> Result<Mat> {
        ensure_dim("normalized input dimension", self.x_mean.len(), x.cols())?;
        Ok(Mat::from_fn(x.rows(), x.cols(), |i, j| (x[(i, j)] - self.x_mean[j]) / self.x_sd[j]))
    }

    pub fn invert_x(&self, x: &Mat) -> Result<Mat> {
        ensure_dim("normalized input dimension", self.x_mean.len(), x.cols())?;
        Ok(Mat::from_fn(x.rows(), x.cols(), |i, j| x[(i, j)] * self.x_sd[j] + self.x_mean[j]))
    }

    pub fn apply_y(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| (v - self.y_mean) / self.y_sd).collect()
    }

    pub fn invert_y(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| v * self.y_sd + self.y_mean).collect()
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        Ok(Dataset {
            x: self.apply_x(&data.x)?,
            y: self.apply_y(&data.y),
        })
    }

    pub fn invert(&self, data: &Dataset) -> Result<Dataset> {
        Ok(Dataset {
            x: self.invert_x(&data.x)?,
            y: self.invert_y(&data.y),
        })
    }
}

pub fn normalize(data: &Dataset) -> Result<(Dataset, NormStats)> {
    let stats = NormStats::fit(data)?;
    Ok((stats.apply(data)?, stats))
}

/// Map a predictive on the normalized target scale back to original units.
pub fn denormalize_dist(dist: &PredictiveDist, stats: &NormStats) -> PredictiveDist {
    let s2 = stats.y_sd * stats.y_sd;
    PredictiveDist {
        mean: stats.invert_y(&dist.mean),
        total_var: dist.total_var.iter().map(|v| v * s2).collect(),
        epistemic_var: dist.epistemic_var.iter().map(|v| v * s2).collect(),
    }
}

/// Inverse of [`denormalize_dist`].
pub fn normalize_dist(dist: &PredictiveDist, stats: &NormStats) -> PredictiveDist {
    let s2 = stats.y_sd * stats.y_sd;
    PredictiveDist {
        mean: stats.apply_y(&dist.mean),
        total_var: dist.total_var.iter().map(|v| v / s2).collect(),
        epistemic_var: dist.epistemic_var.iter().map(|v| v / s2).collect(),
    }
}

// ---------------------------------------------------------------- CSV

/// Parse a rectangular numeric CSV. `target` is the 0-based column holding
/// `y`; every other column becomes a feature, in order. Error rows are
/// 0-based data rows (after any header).
pub fn read_csv<R: Read>(reader: R, target: usize, header: bool) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(header).flexible(false).from_reader(reader);
    let mut data = Vec::new();
    let mut y = Vec::new();
    let mut width = None;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            row,
            col: 0,
            msg: e.to_string(),
        })?;
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(Error::Parse {
                row,
                col: rec.len().min(w),
                msg: format!("expected {w} columns, found {}", rec.len()),
            });
        }
        if target >= w {
            return Err(Error::Parse {
                row,
                col: target,
                msg: format!("target column {target} out of range for {w} columns"),
            });
        }
        for (col, cell) in rec.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row,
                col,
                msg: format!("not a number: {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    col,
                    msg: "non-finite value".into(),
                });
            }
            if col == target {
                y.push(v);
            } else {
                data.push(v);
            }
        }
    }
    let w = width.ok_or(Error::EmptyInput("csv rows"))?;
    let n = y.len();
    Dataset::new(Mat::from_vec(n, w - 1, data), y)
}

pub fn load_csv(path: &std::path::Path, target: usize, header: bool) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv(std::io::BufReader::new(file), target, header)
}

/// Write features then target as the last column (`x0, …, y` header when asked).
/// Values use the shortest round-tripping decimal form.
pub fn write_csv<W: Write>(data: &Dataset, writer: W, header: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Io(e.to_string());
    if header {
        let mut names: Vec<String> = (0..data.dim()).map(|j| format!("x{j}")).collect();
        names.push("y".into());
        w.write_record(&names).map_err(csv_err)?;
    }
    for i in 0..data.len() {
        let mut rec: Vec<String> = data.x.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(data.y[i].to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(data: &Dataset, path: &std::path::Path, header: bool) -> Result<()> {
    write_csv(data, std::fs::File::create(path)?, header)
}

// ---------------------------------------------------------------- UCI gap

#[derive(Debug, Clone, PartialEq)]
pub struct GapSplit {
    pub train: Dataset,
    pub gap: Dataset,
    /// Original row indices of `train`, in sorted-feature order.
    pub train_rows: Vec<usize>,
    pub gap_rows: Vec<usize>,
}

/// Stable-sort by `feature`; rows `[⌊N/3⌋, ⌊N/3⌋ + ⌈N/3⌉)` of the sorted order
/// form the gap, the rest the training set.
pub fn uci_gap_transform(data: &Dataset, feature: usize) -> Result<GapSplit> {
    if feature >= data.dim() {
        return Err(Error::InvalidConfig(format!("feature {feature} out of range for {} columns", data.dim())));
    }
    let n = data.len();
    if n < 3 {
        return Err(Error::InvalidConfig("gap split needs at least 3 rows".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| data.x[(a, feature)].total_cmp(&data.x[(b, feature)]));
    let start = n / 3;
    let end = start + n.div_ceil(3);
    let gap_rows = order[start..end].to_vec();
    let train_rows: Vec<usize> = order[..start].iter().chain(&order[end..]).copied().collect();
    Ok(GapSplit {
        train: data.select(&train_rows),
        gap: data.select(&gap_rows),
        train_rows,
        gap_rows,
    })
}

// ---------------------------------------------------------------- RUB

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UncertaintyKind {
    Epistemic,
    Total,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RubConfig {
    pub dim: usize,
    /// Ray count for `D ≥ 2`; `D = 1` always uses the two rays `±1`.
    #[serde(default = "default_rays")]
    pub rays: usize,
    #[serde(default = "default_r_max")]
    pub r_max: f64,
    /// Number of radii in `[0, r_max]`, endpoints included.
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_kind")]
    pub kind: UncertaintyKind,
}

fn default_rays() -> usize {
    1000
}
fn default_r_max() -> f64 {
    3.0
}
fn default_steps() -> usize {
    100
}
fn default_kind() -> UncertaintyKind {
    UncertaintyKind::Epistemic
}

impl RubConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            rays: default_rays(),
            r_max: default_r_max(),
            steps: default_steps(),
            kind: default_kind(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.rays < 2 || self.steps < 2 || !(self.r_max > 0.0) {
            return Err(Error::InvalidConfig("RUB needs D >= 1, at least 2 rays and 2 radii, r_max > 0".into()));
        }
        Ok(())
    }

    pub fn radii(&self) -> Vec<f64> {
        (0..self.steps).map(|k| self.r_max * k as f64 / (self.steps - 1) as f64).collect()
    }

    pub fn effective_rays(&self) -> usize {
        if self.dim == 1 {
            2
        } else {
            self.rays
        }
    }
}

/// Unit directions: `±1` in 1D, normalized Gaussian draws otherwise.
pub fn rub_directions(config: &RubConfig, stream: &mut RngStream) -> Mat {
    if config.dim == 1 {
        return Mat::column(&[-1.0, 1.0]);
    }
    let d = config.dim;
    let mut out = Mat::zeros(config.rays, d);
    for i in 0..config.rays {
        let v = loop {
            let v = stream.standard_normal(d);
            if norm2(&v) > 1e-12 {
                break v;
            }
        };
        let n = norm2(&v);
        for (o, x) in out.row_mut(i).iter_mut().zip(&v) {
            *o = x / n;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RubReport {
    pub dim: usize,
    pub rays: usize,
    pub kind: UncertaintyKind,
    pub radii: Vec<f64>,
    /// Mean over rays of the uncertainty std at each radius.
    pub mean_std: Vec<f64>,
    /// Population std over rays at each radius.
    pub std_std: Vec<f64>,
    /// 99.7th percentile of the std over every (ray, radius) evaluation.
    pub percentile: f64,
    pub peak: f64,
    pub peak_radius: f64,
}

const RUB_CHUNK: usize = 4096;

/// Evaluate `predict` along rays from the origin. `predict` sees inputs in
/// the model's own (normalized) coordinates and is called on disjoint row
/// chunks in parallel.
pub fn rub_run<F>(predict: F, config: &RubConfig, stream: &mut RngStream) -> Result<RubReport>
where
    F: Fn(&Mat) -> Result<PredictiveDist> + Sync,
{
    config.validate()?;
    let dirs = rub_directions(config, stream);
    let radii = config.radii();
    let (rays, steps, d) = (dirs.rows(), radii.len(), config.dim);
    let points = Mat::from_fn(rays * steps, d, |row, j| dirs[(row / steps, j)] * radii[row % steps]);
    let chunks: Vec<Vec<f64>> = (0..points.rows())
        .collect::<Vec<_>>()
        .par_chunks(RUB_CHUNK)
        .map(|rows| {
            let dist = predict(&points.select_rows(rows))?;
            ensure_dim("RUB predictions", rows.len(), dist.len())?;
            Ok(match config.kind {
                UncertaintyKind::Epistemic => dist.epistemic_std(),
                UncertaintyKind::Total => dist.total_std(),
            })
        })
        .collect::<Result<_>>()?;
    let stds: Vec<f64> = chunks.concat();
    ensure_finite(&stds, "RUB uncertainties")?;
    let mut mean_std = Vec::with_capacity(steps);
    let mut std_std = Vec::with_capacity(steps);
    for k in 0..steps {
        let at: Vec<f64> = (0..rays).map(|r| stds[r * steps + k]).collect();
        mean_std.push(mean(&at));
        std_std.push(std_pop(&at));
    }
    let (peak_idx, peak) = mean_std
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
    Ok(RubReport {
        dim: d,
        rays,
        kind: config.kind,
        percentile: percentile(&stds, 99.7),
        peak,
        peak_radius: radii[peak_idx],
        radii,
        mean_std,
        std_std,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RubScore {
    pub statistic: f64,
    /// `2^−D`.
    pub ideal: f64,
    pub ratio: f64,
}

pub fn rub_ideal_score(report: &RubReport, dim: usize) -> RubScore {
    let ideal = 0.5f64.powi(dim as i32);
    RubScore {
        statistic: report.percentile,
        ideal,
        ratio: report.percentile / ideal,
    }
}

/// `radius, mean_std, std_std` rows with a header.
pub fn write_rub_csv<W: Write>(report: &RubReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(["radius", "mean_std", "std_std"]).map_err(csv_err)?;
    for k in 0..report.radii.len() {
        w.write_record([report.radii[k].to_string(), report.mean_std[k].to_string(), report.std_std[k].to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------- transfer / gap metrics

/// Refit the Bayesian head on the frozen features of `train`, then score `test`.
pub fn transfer_eval(params: &MlpParams, train: &Dataset, test: &Dataset, alpha: f64, noise_var: f64) -> Result<f64> {
    let post = fit_blr(&params.features(&train.x)?, &train.y, alpha, noise_var)?;
    let dist = post.predict(&params.features(&test.x)?)?;
    avg_log_likelihood(&dist, &test.y)
}

/// `100·(mean gap epistemic std / mean not-gap epistemic std − 1)`.
pub fn epistemic_gap_ratio(gap: &PredictiveDist, not_gap: &PredictiveDist) -> Result<f64> {
    if gap.is_empty() || not_gap.is_empty() {
        return Err(Error::EmptyInput("gap ratio predictions"));
    }
    let g = mean(&gap.epistemic_std());
    let n = mean(&not_gap.epistemic_std());
    if !(n > 0.0) {
        return Err(Error::InvalidConfig("not-gap epistemic uncertainty is zero".into()));
    }
    Ok(100.0 * (g / n - 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapDetection {
    pub mean: f64,
    pub std: f64,
    pub detected: bool,
}

/// Detection when the mean increase sits at least one std above zero.
pub fn gap_detected(mean: f64, std: f64) -> bool {
    mean - std > 0.0
}

/// Summarize repeated-run percent increases (population std).
pub fn gap_detection(runs: &[f64]) -> Result<GapDetection> {
    if runs.is_empty() {
        return Err(Error::EmptyInput("gap ratio runs"));
    }
    let (m, s) = (mean(runs), std_pop(runs));
    Ok(GapDetection {
        mean: m,
        std: s,
        detected: gap_detected(m, s),
    })
}
