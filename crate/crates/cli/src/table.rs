//! Numeric CSV helpers for prediction files and raw input matrices.

use std::path::Path;

use unalab::blr::PredictiveDist;
use unalab::numkit::Mat;

use crate::error::{config_err, CliError, CliResult};

pub const PREDICTION_COLUMNS: [&str; 3] = ["mean", "std_total", "std_epistemic"];

/// A numeric table with an optional header row.
pub struct Table {
    pub header: Option<Vec<String>>,
    pub values: Mat,
}

pub fn read_table(path: &Path, header: bool) -> CliResult<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(header)
        .from_path(path)
        .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let head = if header {
        Some(rdr.headers().map_err(|e| config_err(format!("{}: {e}", path.display())))?.iter().map(str::to_string).collect())
    } else {
        None
    };
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| config_err(format!("{} row {row}: {e}", path.display())))?;
        if *width.get_or_insert(rec.len()) != rec.len() {
            return Err(config_err(format!("{} row {row}: ragged row", path.display())));
        }
        for (col, cell) in rec.iter().enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| config_err(format!("{} row {row}, column {col}: not a number: {cell:?}", path.display())))?;
            data.push(v);
        }
        rows += 1;
    }
    let cols = width.unwrap_or(0);
    if rows == 0 {
        return Err(config_err(format!("{}: no data rows", path.display())));
    }
    Ok(Table {
        header: head,
        values: Mat::from_vec(rows, cols, data),
    })
}

/// Column count of the first record.
pub fn column_count(path: &Path, header: bool) -> CliResult<usize> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(header)
        .from_path(path)
        .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    if header {
        let n = rdr.headers().map_err(|e| config_err(format!("{}: {e}", path.display())))?.len();
        return Ok(n);
    }
    match rdr.records().next() {
        Some(rec) => Ok(rec.map_err(|e| config_err(format!("{}: {e}", path.display())))?.len()),
        None => Err(config_err(format!("{}: empty file", path.display()))),
    }
}

/// `x0..x{D−1}, mean, std_total, std_epistemic`.
pub fn prediction_header(dim: usize) -> Vec<String> {
    (0..dim).map(|j| format!("x{j}")).chain(PREDICTION_COLUMNS.iter().map(|s| s.to_string())).collect()
}

pub fn prediction_csv(x: &Mat, dist: &PredictiveDist) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Runtime(e.to_string());
    w.write_record(prediction_header(x.cols())).map_err(err)?;
    let total = dist.total_std();
    let epistemic = dist.epistemic_std();
    for i in 0..x.rows() {
        let mut rec: Vec<String> = x.row(i).iter().map(f64::to_string).collect();
        rec.push(dist.mean[i].to_string());
        rec.push(total[i].to_string());
        rec.push(epistemic[i].to_string());
        w.write_record(&rec).map_err(err)?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
}

/// Prediction file as inputs plus the predictive it records.
pub struct Predictions {
    pub x: Mat,
    pub dist: PredictiveDist,
}

pub fn read_predictions(path: &Path) -> CliResult<Predictions> {
    let table = read_table(path, true)?;
    let header = table.header.unwrap_or_default();
    let cols = table.values.cols();
    if cols < 4 || header != prediction_header(cols - 3) {
        return Err(config_err(format!(
            "{}: not a prediction file (expected header x0,…,mean,std_total,std_epistemic, found {})",
            path.display(),
            header.join(",")
        )));
    }
    let d = cols - 3;
    let v = &table.values;
    let x = Mat::from_fn(v.rows(), d, |i, j| v[(i, j)]);
    let sq = |c: usize| (0..v.rows()).map(|i| v[(i, c)] * v[(i, c)]).collect::<Vec<_>>();
    Ok(Predictions {
        x,
        dist: PredictiveDist {
            mean: v.col(d),
            total_var: sq(d + 1),
            epistemic_var: sq(d + 2),
        },
    })
}
