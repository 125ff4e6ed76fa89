//! Effect-estimation metrics against oracle potential outcomes, aggregation
//! over replications, and the comparison table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::baselines::BaselineModel;
use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tspf::{predict_cate, predict_cate_stage1, Stage1Model, Stage2Model};

/// Anything that maps covariates to effect estimates.
pub trait CateModel {
    fn predict_cate(&self, x: &Tensor) -> Result<Vec<f64>>;
}

impl CateModel for Stage2Model {
    fn predict_cate(&self, x: &Tensor) -> Result<Vec<f64>> {
        predict_cate(self, x)
    }
}

impl CateModel for Stage1Model {
    fn predict_cate(&self, x: &Tensor) -> Result<Vec<f64>> {
        predict_cate_stage1(self, x)
    }
}

impl CateModel for BaselineModel {
    fn predict_cate(&self, x: &Tensor) -> Result<Vec<f64>> {
        BaselineModel::predict_cate(self, x)
    }
}

fn residuals(tau_hat: &[f64], y1: &[f64], y0: &[f64]) -> Result<Vec<f64>> {
    if tau_hat.len() != y1.len() || y1.len() != y0.len() {
        return Err(Error::contract(format!(
            "metric inputs differ in length: {}, {}, {}",
            tau_hat.len(),
            y1.len(),
            y0.len()
        )));
    }
    if tau_hat.is_empty() {
        return Err(Error::contract("metrics need at least one unit"));
    }
    Ok(tau_hat
        .iter()
        .zip(y1.iter().zip(y0))
        .map(|(t, (a, b))| t - (a - b))
        .collect())
}

/// `sqrt(mean((τ̂ - (y1 - y0))²))`.
pub fn pehe(tau_hat: &[f64], y1: &[f64], y0: &[f64]) -> Result<f64> {
    let r = residuals(tau_hat, y1, y0)?;
    Ok((r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64).sqrt())
}

/// `|Σ (τ̂ - (y1 - y0))| / n`.
pub fn ate_error(tau_hat: &[f64], y1: &[f64], y0: &[f64]) -> Result<f64> {
    let r = residuals(tau_hat, y1, y0)?;
    Ok(r.iter().sum::<f64>().abs() / r.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub pehe_in: f64,
    pub pehe_out: f64,
    pub ate_in: f64,
    pub ate_out: f64,
}

impl Metrics {
    pub fn as_array(&self) -> [f64; 4] {
        [self.pehe_in, self.ate_in, self.pehe_out, self.ate_out]
    }
}

/// In-sample on the training slice (observational plus trial rows),
/// out-of-sample on the test split.
pub fn evaluate(model: &dyn CateModel, bundle: &DatasetBundle) -> Result<Metrics> {
    let train = bundle.train_pool()?;
    let (pi, pt) = (train.potentials()?, bundle.test.potentials()?);
    let tau_in = model.predict_cate(&train.x)?;
    let tau_out = model.predict_cate(&bundle.test.x)?;
    Ok(Metrics {
        pehe_in: pehe(&tau_in, &pi.y1, &pi.y0)?,
        pehe_out: pehe(&tau_out, &pt.y1, &pt.y0)?,
        ate_in: ate_error(&tau_in, &pi.y1, &pi.y0)?,
        ate_out: ate_error(&tau_out, &pt.y1, &pt.y0)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (`n - 1` denominator); 0 for one value.
    pub std: f64,
}

impl Summary {
    pub fn of(v: &[f64]) -> Summary {
        let n = v.len();
        if n == 0 {
            return Summary {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Summary { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub replication: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub config_hash: String,
    /// Per-replication metrics of completed replications, by index.
    pub replications: Vec<(usize, Metrics)>,
    pub failed: Vec<Failure>,
    pub pehe_in: Summary,
    pub pehe_out: Summary,
    pub ate_in: Summary,
    pub ate_out: Summary,
}

impl MetricsReport {
    pub fn aggregate(
        model: &str,
        config_hash: &str,
        replications: Vec<(usize, Metrics)>,
        failed: Vec<Failure>,
    ) -> Self {
        let col = |f: fn(&Metrics) -> f64| {
            Summary::of(&replications.iter().map(|(_, m)| f(m)).collect::<Vec<_>>())
        };
        MetricsReport {
            model: model.to_string(),
            config_hash: config_hash.to_string(),
            pehe_in: col(|m| m.pehe_in),
            pehe_out: col(|m| m.pehe_out),
            ate_in: col(|m| m.ate_in),
            ate_out: col(|m| m.ate_out),
            replications,
            failed,
        }
    }

    pub fn summaries(&self) -> [Summary; 4] {
        [self.pehe_in, self.ate_in, self.pehe_out, self.ate_out]
    }
}

pub const TABLE_COLUMNS: [&str; 4] = [
    "in sqrt(PEHE)",
    "in ATE err",
    "out sqrt(PEHE)",
    "out ATE err",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    pub mean: String,
    pub std: String,
    pub best: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub cells: Vec<TableCell>,
    pub completed: usize,
    pub failed: usize,
}

/// Method × metric table. Values are rounded to two decimals and the
/// lowest rounded mean of each column is marked; ties are all marked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
}

fn round2(v: f64) -> String {
    format!("{v:.2}")
}

impl ResultsTable {
    pub fn from_reports(reports: &[MetricsReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::contract("no completed runs to tabulate"));
        }
        let mut rows: Vec<TableRow> = reports
            .iter()
            .map(|r| TableRow {
                method: r.model.clone(),
                cells: r
                    .summaries()
                    .iter()
                    .map(|s| TableCell {
                        mean: round2(s.mean),
                        std: round2(s.std),
                        best: false,
                    })
                    .collect(),
                completed: r.replications.len(),
                failed: r.failed.len(),
            })
            .collect();
        for c in 0..TABLE_COLUMNS.len() {
            let best = rows
                .iter()
                .filter_map(|r| {
                    r.cells[c]
                        .mean
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                })
                .fold(f64::INFINITY, f64::min);
            for r in &mut rows {
                r.cells[c].best = r.cells[c].mean.parse::<f64>().is_ok_and(|v| v == best);
            }
        }
        Ok(ResultsTable {
            columns: TABLE_COLUMNS.iter().map(|s| s.to_string()).collect(),
            rows,
        })
    }

    /// Fixed-width text; best entries carry a trailing `*`.
    pub fn render_text(&self) -> String {
        let cell =
            |c: &TableCell| format!("{} ± {}{}", c.mean, c.std, if c.best { " *" } else { "" });
        let mut width = vec!["method".len()];
        width.extend(self.columns.iter().map(String::len));
        for r in &self.rows {
            width[0] = width[0].max(r.method.len());
            for (j, c) in r.cells.iter().enumerate() {
                width[j + 1] = width[j + 1].max(cell(c).chars().count());
            }
        }
        let mut out = String::new();
        let pad =
            |s: &str, w: usize| format!("{s}{}", " ".repeat(w.saturating_sub(s.chars().count())));
        let mut line = pad("method", width[0]);
        for (j, c) in self.columns.iter().enumerate() {
            line.push_str("  ");
            line.push_str(&pad(c, width[j + 1]));
        }
        let _ = writeln!(out, "{}", line.trim_end());
        for r in &self.rows {
            let mut line = pad(&r.method, width[0]);
            for (j, c) in r.cells.iter().enumerate() {
                line.push_str("  ");
                line.push_str(&pad(&cell(c), width[j + 1]));
            }
            let _ = writeln!(out, "{}", line.trim_end());
        }
        if self.rows.iter().any(|r| r.failed > 0) {
            for r in self.rows.iter().filter(|r| r.failed > 0) {
                let _ = writeln!(
                    out,
                    "{}: {} replication(s) failed and were excluded",
                    r.method, r.failed
                );
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::data::{build_bundle, synthetic_covariates};

    #[test]
    fn pehe_examples() {
        assert_eq!(pehe(&[4.0, 4.0], &[5.0, 6.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(
            (pehe(&[1.0, 2.0], &[0.0, 0.0], &[0.0, 0.0]).unwrap() - 2.5f64.sqrt()).abs() < 1e-15
        );
        assert!((pehe(&[1.0, 2.0], &[0.0, 0.0], &[0.0, 0.0]).unwrap() - 1.58114).abs() < 1e-5);
        assert!(pehe(&[1.0], &[0.0, 0.0], &[0.0, 0.0]).is_err());
        assert!(pehe(&[], &[], &[]).is_err());
    }

    #[test]
    fn ate_examples() {
        assert_eq!(
            ate_error(&[1.0, -1.0], &[0.0, 0.0], &[0.0, 0.0]).unwrap(),
            0.0
        );
        assert_eq!(
            ate_error(&[1.0, 2.0], &[0.0, 0.0], &[0.0, 0.0]).unwrap(),
            1.5
        );
        assert!(ate_error(&[1.0, 2.0], &[0.0], &[0.0]).is_err());
    }

    proptest! {
        #[test]
        fn ate_bounded_by_pehe(v in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 1..50)) {
            let tau: Vec<f64> = v.iter().map(|x| x.0).collect();
            let y1: Vec<f64> = v.iter().map(|x| x.1).collect();
            let y0: Vec<f64> = v.iter().map(|x| x.2).collect();
            prop_assert!(ate_error(&tau, &y1, &y0).unwrap() <= pehe(&tau, &y1, &y0).unwrap() + 1e-12);
        }

        #[test]
        fn constant_offset(delta in -3.0f64..3.0, n in 1usize..20) {
            let y1 = vec![2.0; n];
            let y0 = vec![0.5; n];
            let tau = vec![1.5 + delta; n];
            prop_assert!((pehe(&tau, &y1, &y0).unwrap() - delta.abs()).abs() < 1e-12);
        }

        #[test]
        fn permutation_invariant(v in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..30), k in 0usize..30) {
            let tau: Vec<f64> = v.iter().map(|x| x.0).collect();
            let y1: Vec<f64> = v.iter().map(|x| x.1).collect();
            let y0 = vec![0.0; v.len()];
            let rot = |a: &[f64]| { let mut a = a.to_vec(); a.rotate_left(k % v.len()); a };
            prop_assert!((pehe(&tau, &y1, &y0).unwrap() - pehe(&rot(&tau), &rot(&y1), &y0).unwrap()).abs() < 1e-12);
            prop_assert!((ate_error(&tau, &y1, &y0).unwrap() - ate_error(&rot(&tau), &rot(&y1), &y0).unwrap()).abs() < 1e-12);
        }
    }

    struct Oracle;

    impl CateModel for Oracle {
        fn predict_cate(&self, _x: &Tensor) -> Result<Vec<f64>> {
            unreachable!()
        }
    }

    struct Lookup(Vec<(Vec<f64>, f64)>);

    impl CateModel for Lookup {
        fn predict_cate(&self, x: &Tensor) -> Result<Vec<f64>> {
            Ok((0..x.rows())
                .map(|i| {
                    self.0
                        .iter()
                        .find(|(k, _)| k.as_slice() == x.row(i))
                        .unwrap()
                        .1
                })
                .collect())
        }
    }

    #[test]
    fn oracle_model_scores_zero() {
        let g = build_bundle(&synthetic_covariates(300, 3, 0), 4, 0.1, 1).unwrap();
        let b = &g.bundle;
        let mut table = Vec::new();
        for ds in [&b.obs_train, &b.rct_train, &b.test] {
            let eff = ds.true_effects().unwrap();
            table.extend((0..ds.len()).map(|i| (ds.x.row(i).to_vec(), eff[i])));
        }
        let m = evaluate(&Lookup(table), b).unwrap();
        assert_eq!(m.as_array(), [0.0; 4]);
        let _ = Oracle;
    }

    #[test]
    fn aggregation_recomputes() {
        let reps: Vec<(usize, Metrics)> = (0..5)
            .map(|i| {
                let v = i as f64 * 0.1 + 0.3;
                (
                    i,
                    Metrics {
                        pehe_in: v,
                        pehe_out: v * 2.0,
                        ate_in: v / 3.0,
                        ate_out: 0.01,
                    },
                )
            })
            .collect();
        let r = MetricsReport::aggregate("x", "h", reps.clone(), vec![]);
        let manual = reps.iter().map(|(_, m)| m.pehe_out).sum::<f64>() / 5.0;
        assert!((r.pehe_out.mean - manual).abs() <= 1e-12);
        let var = reps
            .iter()
            .map(|(_, m)| (m.pehe_out - manual).powi(2))
            .sum::<f64>()
            / 4.0;
        assert!((r.pehe_out.std - var.sqrt()).abs() <= 1e-12);
        assert_eq!(Summary::of(&[2.0]).std, 0.0);
    }

    fn report(name: &str, pehe_out: f64) -> MetricsReport {
        let m = Metrics {
            pehe_in: 0.5,
            pehe_out,
            ate_in: 0.1,
            ate_out: 0.2,
        };
        MetricsReport::aggregate(name, "h", vec![(0, m)], vec![])
    }

    #[test]
    fn table_marks_ties() {
        let t =
            ResultsTable::from_reports(&[report("a", 0.123), report("b", 0.118), report("c", 0.5)])
                .unwrap();
        let best: Vec<bool> = t.rows.iter().map(|r| r.cells[2].best).collect();
        assert_eq!(best, vec![true, true, false]);
        assert!(t.rows.iter().all(|r| r.cells[0].best));
        assert_eq!(t.rows[0].cells[2].mean, "0.12");
        let text = t.render_text();
        assert_eq!(text.lines().count(), 4);
        assert!(text.contains("0.12 ± 0.00 *"));
    }

    #[test]
    fn table_single_row_and_empty() {
        let t = ResultsTable::from_reports(&[report("only", 1.0)]).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert!(ResultsTable::from_reports(&[]).is_err());
    }
}
