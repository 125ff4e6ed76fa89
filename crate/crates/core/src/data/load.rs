use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, stream};
use crate::tensor::Tensor;

/// Expected covariate layout of a raw CSV file: a header row naming
/// `x1..x{dim}`, optionally followed by the original `t` and `y` columns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CovariateSchema {
    pub name: String,
    pub dim: usize,
}

impl CovariateSchema {
    pub fn ihdp() -> Self {
        CovariateSchema {
            name: "ihdp".into(),
            dim: 25,
        }
    }

    pub fn jobs() -> Self {
        CovariateSchema {
            name: "jobs".into(),
            dim: 17,
        }
    }

    pub fn custom(dim: usize) -> Self {
        CovariateSchema {
            name: "custom".into(),
            dim,
        }
    }

    pub fn column_names(&self) -> Vec<String> {
        (1..=self.dim).map(|j| format!("x{j}")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaling {
    pub mean: f64,
    pub std: f64,
    /// Binary columns are passed through unscaled.
    pub binary: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CovariateTable {
    /// Standardized covariates, `[n, d]`.
    pub x: Tensor,
    pub columns: Vec<String>,
    pub scaling: Vec<ColumnScaling>,
    pub t: Option<Vec<f64>>,
    pub y: Option<Vec<f64>>,
}

pub fn load_covariates(path: &Path, schema: &CovariateSchema) -> Result<CovariateTable> {
    let load_err = |row: usize, column: usize, msg: String| Error::Load {
        path: path.to_path_buf(),
        row,
        column,
        msg,
    };
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| load_err(0, 0, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.iter().all(String::is_empty) {
        return Err(load_err(0, 0, "empty file".into()));
    }

    let wanted = schema.column_names();
    let mut x_cols = Vec::with_capacity(schema.dim);
    for name in &wanted {
        let pos = header.iter().position(|h| h == name).ok_or_else(|| {
            load_err(
                0,
                0,
                format!(
                    "missing column `{name}` required by the {} schema",
                    schema.name
                ),
            )
        })?;
        x_cols.push(pos);
    }
    for (j, h) in header.iter().enumerate() {
        if !wanted.contains(h) && h != "t" && h != "y" {
            return Err(load_err(0, j + 1, format!("unexpected column `{h}`")));
        }
    }
    let t_col = header.iter().position(|h| h == "t");
    let y_col = header.iter().position(|h| h == "y");

    let mut values = Vec::new();
    let mut t = Vec::new();
    let mut y = Vec::new();
    for (r, record) in reader.records().enumerate() {
        // Row numbers are 1-based file lines, header is line 1.
        let line = r + 2;
        let record = record.map_err(|e| load_err(line, 0, e.to_string()))?;
        if record.len() != header.len() {
            return Err(load_err(
                line,
                record.len().min(header.len()) + 1,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        let cell = |j: usize| -> Result<f64> {
            let s = &record[j];
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| load_err(line, j + 1, format!("non-numeric cell `{s}`")))
        };
        for &j in &x_cols {
            values.push(cell(j)?);
        }
        if let Some(j) = t_col {
            t.push(cell(j)?);
        }
        if let Some(j) = y_col {
            y.push(cell(j)?);
        }
    }
    let n = values.len() / schema.dim;
    if n == 0 {
        return Err(load_err(1, 0, "no data rows".into()));
    }
    let mut x = Tensor::matrix(n, schema.dim, values)?;
    let scaling = standardize(&mut x);
    Ok(CovariateTable {
        x,
        columns: wanted,
        scaling,
        t: t_col.map(|_| t),
        y: y_col.map(|_| y),
    })
}

/// Z-scores continuous columns in place; 0/1 columns are left alone.
fn standardize(x: &mut Tensor) -> Vec<ColumnScaling> {
    let (n, d) = (x.rows(), x.cols());
    let mut out = Vec::with_capacity(d);
    for j in 0..d {
        let col: Vec<f64> = (0..n).map(|i| x.get(i, j)).collect();
        let binary = col.iter().all(|&v| v == 0.0 || v == 1.0);
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        if !binary {
            for i in 0..n {
                x.set(i, j, (col[i] - mean) / std);
            }
        }
        out.push(ColumnScaling { mean, std, binary });
    }
    out
}

/// Standard-normal covariates for the fully synthetic benchmark.
pub fn synthetic_covariates(n: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = seeded(seed, stream::COVARIATES);
    let values = (0..n * d)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Tensor::matrix(n, d, values).expect("n*d values")
}
