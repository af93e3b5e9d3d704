//! CSV ingestion and per-replicate table output.
//!
//! Input dialect: comma-separated, `.` decimal, UTF-8, mandatory header.
//! The response column is named `y`; every remaining column is a numeric
//! covariate, in header order. Missing or malformed cells are hard errors
//! with row/column diagnostics.

use ndarray::Array2;
use std::path::Path;

use nbelnet::model::Dataset;

use crate::jout::format_e12;
use crate::CliError;

pub struct CsvData {
    pub dataset: Dataset<f64>,
    pub covariate_names: Vec<String>,
    pub y: Vec<u64>,
}

pub fn read_dataset(path: &Path, theta: f64) -> Result<CsvData, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::input(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::input(format!("{}: bad header: {e}", path.display())))?
        .clone();
    let y_col = headers
        .iter()
        .position(|h| h == "y")
        .ok_or_else(|| CliError::input(format!("{}: no column named 'y'", path.display())))?;
    let covariate_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != y_col)
        .map(|(_, h)| h.to_string())
        .collect();
    if covariate_names.is_empty() {
        return Err(CliError::input(format!(
            "{}: need at least one covariate column besides 'y'",
            path.display()
        )));
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut y: Vec<u64> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| CliError::input(format!("{}: row {}: {e}", path.display(), r + 2)))?;
        if record.len() != headers.len() {
            return Err(CliError::input(format!(
                "{}: row {}: expected {} fields, found {}",
                path.display(),
                r + 2,
                headers.len(),
                record.len()
            )));
        }
        let mut row = Vec::with_capacity(covariate_names.len());
        for (c, field) in record.iter().enumerate() {
            if field.is_empty() {
                return Err(CliError::input(format!(
                    "{}: row {}, column '{}': missing value",
                    path.display(),
                    r + 2,
                    &headers[c]
                )));
            }
            if c == y_col {
                let value: f64 = field.parse().map_err(|_| {
                    CliError::input(format!(
                        "{}: row {}, column 'y': '{field}' is not a number",
                        path.display(),
                        r + 2
                    ))
                })?;
                if value < 0.0 || value.fract() != 0.0 || !value.is_finite() {
                    return Err(CliError::input(format!(
                        "{}: row {}, column 'y': '{field}' is not a nonnegative integer",
                        path.display(),
                        r + 2
                    )));
                }
                y.push(value as u64);
            } else {
                let value: f64 = field.parse().map_err(|_| {
                    CliError::input(format!(
                        "{}: row {}, column '{}': '{field}' is not a number",
                        path.display(),
                        r + 2,
                        &headers[c]
                    ))
                })?;
                row.push(value);
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::input(format!("{}: no data rows", path.display())));
    }

    let n = rows.len();
    let p = covariate_names.len();
    let mut x = Array2::zeros((n, p));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            x[(i, j)] = v;
        }
    }
    let dataset = Dataset::new(x, y.clone(), theta)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    Ok(CsvData {
        dataset,
        covariate_names,
        y,
    })
}

/// Writes a per-replicate (or per-pair) table with `%.12e` floats.
pub fn write_table(
    path: &Path,
    columns: &[&str],
    rows: impl Iterator<Item = Vec<f64>>,
) -> Result<(), CliError> {
    let mut out = String::new();
    out.push_str(&columns.join(","));
    out.push('\n');
    for row in rows {
        let rendered: Vec<String> = row.iter().map(|&v| format_e12(v)).collect();
        out.push_str(&rendered.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)
        .map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))
}
