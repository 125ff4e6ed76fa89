//! Per-split CSV files (`x1..xd, t, y, g, y0, y1`) plus a JSON sidecar with
//! the synthesis weights.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Generated, Potentials, SynthesisParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SPLIT_FILES: [&str; 4] = [
    "obs_train.csv",
    "rct_train.csv",
    "validation.csv",
    "test.csv",
];
pub const SIDECAR_FILE: &str = "synthesis.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleSidecar {
    pub seed: u64,
    pub c: usize,
    pub sizes: [usize; 4],
    pub synthesis: SynthesisParams,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

pub fn write_dataset_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let p = ds.potentials()?;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header: Vec<String> = (1..=ds.dim()).map(|j| format!("x{j}")).collect();
    header.extend(["t", "y", "g", "y0", "y1"].map(String::from));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.x.row(i).iter().map(f64::to_string).collect();
        rec.push(ds.t[i].to_string());
        rec.push(ds.y[i].to_string());
        rec.push(ds.g[i].to_string());
        rec.push(p.y0[i].to_string());
        rec.push(p.y1[i].to_string());
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset_csv(path: &Path) -> Result<Dataset> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let d = header.len().checked_sub(5).ok_or_else(|| Error::Load {
        path: path.to_path_buf(),
        row: 1,
        column: 0,
        msg: "expected columns x1..xd, t, y, g, y0, y1".into(),
    })?;
    let (mut x, mut t, mut y, mut g, mut y0, mut y1) =
        (vec![], vec![], vec![], vec![], vec![], vec![]);
    for (r_i, rec) in r.records().enumerate() {
        let line = r_i + 2;
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let num = |j: usize| -> Result<f64> {
            rec.get(j)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Load {
                    path: path.to_path_buf(),
                    row: line,
                    column: j + 1,
                    msg: format!("bad cell `{}`", rec.get(j).unwrap_or("")),
                })
        };
        for j in 0..d {
            x.push(num(j)?);
        }
        t.push(num(d)? as u8);
        y.push(num(d + 1)?);
        g.push(num(d + 2)? as u8);
        y0.push(num(d + 3)?);
        y1.push(num(d + 4)?);
    }
    let n = t.len();
    Dataset::new(
        Tensor::matrix(n, d, x)?,
        t,
        y,
        g,
        Some(Potentials { y0, y1 }),
    )
}

/// Writes the four splits and the sidecar into `dir` (created if needed).
pub fn write_bundle(dir: &Path, generated: &Generated) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let b = &generated.bundle;
    let parts = [&b.obs_train, &b.rct_train, &b.validation, &b.test];
    for (ds, name) in parts.iter().zip(SPLIT_FILES) {
        write_dataset_csv(ds, &dir.join(name))?;
    }
    let sidecar = BundleSidecar {
        seed: generated.seed,
        c: generated.synthesis.c,
        sizes: parts.map(Dataset::len),
        synthesis: generated.synthesis.clone(),
    };
    let path = dir.join(SIDECAR_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&path, e))
}
