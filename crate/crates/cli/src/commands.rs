//! Subcommand bodies. Each takes a parsed config and an output directory
//! and returns what it wrote, so the binary stays a thin shell.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tspf_core::data::write_bundle;
use tspf_core::eval::{Failure, MetricsReport, ResultsTable};
use tspf_core::experiment::{
    run_replications, tspf_validation_score, tune_grid, Method, PipelineSpec, ReplicationOutput,
    RunOutcome, TuneMode, TuneOutcome,
};
use tspf_core::tspf::{History, Lambdas, Stage1Epoch, Stage2Epoch};

use crate::config::ExperimentConfig;
use crate::plot::{line_chart, Series};
use crate::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const TABLE_TEXT_FILE: &str = "table.txt";
pub const TABLE_JSON_FILE: &str = "table.json";
pub const TUNE_FILE: &str = "tune.json";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn in_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn rep_dir(rep: usize) -> String {
    format!("rep_{rep:03}")
}

/// Per-replication entry of the run manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationEntry {
    pub replication: usize,
    pub seed: u64,
    pub dir: String,
    pub files: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage1_selected_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage2_selected_epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub replications: usize,
    pub methods: Vec<Method>,
    pub completed: Vec<ReplicationEntry>,
    /// Failed replications are listed here and left out of every aggregate.
    pub failed: Vec<Failure>,
    pub config: serde_json::Value,
}

#[derive(Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub reports: Vec<MetricsReport>,
    pub table: Option<ResultsTable>,
    pub failed: Vec<Failure>,
}

fn history_csv_stage1(h: &History<Stage1Epoch>) -> String {
    let mut s = String::from("epoch,total,factual,reconstruction,balance,validation\n");
    for e in &h.epochs {
        let v = e.validation.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            e.epoch, e.total, e.factual, e.reconstruction, e.balance, v
        );
    }
    s
}

fn history_csv_stage2(h: &History<Stage2Epoch>) -> String {
    let mut s = String::from("epoch,total,factual,mi,shift,q_nll,validation\n");
    for e in &h.epochs {
        let v = e.validation.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            e.epoch, e.total, e.factual, e.mi, e.shift, e.q_nll, v
        );
    }
    s
}

fn write_replication(
    dir: &Path,
    spec: &PipelineSpec,
    out: &ReplicationOutput,
) -> Result<ReplicationEntry> {
    let name = rep_dir(out.index);
    let rd = dir.join(&name);
    create_dir(&rd)?;
    let mut files: Vec<String> = Vec::new();
    let put = |files: &mut Vec<String>, file: &str, contents: String| -> Result<()> {
        write(&rd.join(file), contents)?;
        files.push(file.to_string());
        Ok(())
    };
    let mut entry = ReplicationEntry {
        replication: out.index,
        seed: out.seed,
        dir: name.clone(),
        files: Vec::new(),
        stage1_selected_epoch: None,
        stage2_selected_epoch: None,
    };
    if let Some(fit) = &out.tspf {
        let hash = spec.config_for(out.index).hash();
        put(
            &mut files,
            "tspf_stage1.ckpt.json",
            fit.stage1.to_checkpoint(&hash).to_json()?,
        )?;
        put(
            &mut files,
            "tspf_stage2.ckpt.json",
            fit.stage2.to_checkpoint(&hash).to_json()?,
        )?;
        put(
            &mut files,
            "losses_stage1.csv",
            history_csv_stage1(&fit.history1),
        )?;
        put(
            &mut files,
            "losses_stage2.csv",
            history_csv_stage2(&fit.history2),
        )?;
        entry.stage1_selected_epoch = Some(fit.history1.selected_epoch);
        entry.stage2_selected_epoch = Some(fit.history2.selected_epoch);

        let offset = fit.history1.epochs.len() as f64;
        let s1 = &fit.history1.epochs;
        let s2 = &fit.history2.epochs;
        let series = vec![
            Series {
                name: "stage 1 objective".into(),
                points: s1.iter().map(|e| (e.epoch as f64, e.total)).collect(),
            },
            Series {
                name: "stage 1 validation".into(),
                points: s1
                    .iter()
                    .filter_map(|e| e.validation.map(|v| (e.epoch as f64, v)))
                    .collect(),
            },
            Series {
                name: "stage 2 objective".into(),
                points: s2
                    .iter()
                    .map(|e| (offset + e.epoch as f64, e.total))
                    .collect(),
            },
            Series {
                name: "stage 2 validation".into(),
                points: s2
                    .iter()
                    .filter_map(|e| e.validation.map(|v| (offset + e.epoch as f64, v)))
                    .collect(),
            },
        ];
        let svg = "loss_curves.svg";
        line_chart(
            &rd.join(svg),
            &format!("replication {}", out.index),
            "epoch",
            "loss",
            &series,
        )?;
        files.push(svg.to_string());
    }
    for b in &out.baselines {
        put(
            &mut files,
            &format!("{}.ckpt.json", b.kind.name()),
            b.to_checkpoint().to_json()?,
        )?;
    }
    entry.files = files;
    Ok(entry)
}

fn write_pehe_by_seed(dir: &Path, spec: &PipelineSpec, outcome: &RunOutcome) -> Result<()> {
    let mut csv = String::from("replication,seed");
    for m in &spec.methods {
        let _ = write!(csv, ",{}", m.name());
    }
    csv.push('\n');
    for r in &outcome.completed {
        let _ = write!(csv, "{},{}", r.index, r.seed);
        for m in &spec.methods {
            let v = r
                .metrics
                .get(m)
                .map(|x| x.pehe_out.to_string())
                .unwrap_or_default();
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    write(&dir.join("pehe_by_seed.csv"), csv)?;
    let series: Vec<Series> = spec
        .methods
        .iter()
        .map(|m| Series {
            name: m.name().to_string(),
            points: outcome
                .completed
                .iter()
                .filter_map(|r| r.metrics.get(m).map(|x| (r.index as f64, x.pehe_out)))
                .collect(),
        })
        .collect();
    line_chart(
        &dir.join("pehe_by_seed.svg"),
        "out-of-sample sqrt(PEHE) by replication",
        "replication",
        "sqrt(PEHE)",
        &series,
    )
}

fn write_table(dir: &Path, table: &ResultsTable) -> Result<()> {
    write(&dir.join(TABLE_TEXT_FILE), table.render_text())?;
    write(&dir.join(TABLE_JSON_FILE), json(table)?)
}

/// Runs every replication and writes checkpoints, loss histories, plots,
/// `metrics.json`, the results table and `manifest.json` under `dir`.
///
/// Failed replications are recorded in the manifest and the reports. The
/// call only errors on a failure if no replication completed.
pub fn run(cfg: &ExperimentConfig, dir: &Path, workers: usize) -> Result<RunSummary> {
    let spec = cfg.pipeline()?;
    create_dir(dir)?;
    let outcome = run_replications(&spec, cfg.replications, workers)?;
    let entries = outcome
        .completed
        .iter()
        .map(|r| write_replication(dir, &spec, r))
        .collect::<Result<Vec<_>>>()?;
    let reports = outcome.reports(&spec);
    write(&dir.join(METRICS_FILE), json(&reports)?)?;
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: spec.train.hash(),
        seed: cfg.seed,
        replications: cfg.replications,
        methods: spec.methods.clone(),
        completed: entries,
        failed: outcome.failed.clone(),
        config: serde_json::to_value(cfg)?,
    };
    write(&dir.join(MANIFEST_FILE), json(&manifest)?)?;
    if outcome.completed.is_empty() {
        let reasons: Vec<String> = outcome
            .failed
            .iter()
            .map(|f| format!("replication {}: {}", f.replication, f.reason))
            .collect();
        return Err(CliError::Usage(format!(
            "every replication failed\n{}",
            reasons.join("\n")
        )));
    }
    let table = ResultsTable::from_reports(&reports)?;
    write_table(dir, &table)?;
    write_pehe_by_seed(dir, &spec, &outcome)?;
    Ok(RunSummary {
        dir: dir.to_path_buf(),
        reports,
        table: Some(table),
        failed: outcome.failed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub mode: TuneMode,
    pub replication: usize,
    pub best: Lambdas,
    pub best_score: f64,
    pub candidates: usize,
    pub outcome: TuneOutcome,
}

/// Searches the `[tune]` grid on the bundle of replication 0, scoring each
/// candidate by the stage-2 validation loss. Writes `tune.json`.
pub fn tune(cfg: &ExperimentConfig, dir: &Path, workers: usize) -> Result<TuneReport> {
    let t = cfg
        .tune
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("{}: no [tune] section", cfg.source.display())))?;
    t.grid.check_range()?;
    let spec = cfg.pipeline()?;
    let generated = spec.bundle(0)?;
    let eval = |l: Lambdas| tspf_validation_score(&spec, &generated, 0, l);
    let outcome = in_pool(workers, || tune_grid(&eval, &t.grid, t.mode))??;
    let report = TuneReport {
        mode: t.mode,
        replication: 0,
        best: outcome.best,
        best_score: outcome.best_score,
        candidates: outcome.candidates.len(),
        outcome,
    };
    create_dir(dir)?;
    write(&dir.join(TUNE_FILE), json(&report)?)?;
    Ok(report)
}

/// Rebuilds the results table from `metrics.json` in `dir`.
pub fn report(dir: &Path) -> Result<ResultsTable> {
    let path = dir.join(METRICS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Io {
        path: path.clone(),
        source: e,
    })?;
    let reports: Vec<MetricsReport> = serde_json::from_str(&text)?;
    let done: Vec<MetricsReport> = reports
        .into_iter()
        .filter(|r| !r.replications.is_empty())
        .collect();
    if done.is_empty() {
        return Err(CliError::Usage(format!(
            "{}: no completed runs",
            path.display()
        )));
    }
    let table = ResultsTable::from_reports(&done)?;
    write_table(dir, &table)?;
    Ok(table)
}

/// Writes the splits of every replication under `dir/rep_NNN/`.
pub fn synth(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let spec = cfg.pipeline()?;
    (0..cfg.replications)
        .map(|rep| {
            let d = dir.join(rep_dir(rep));
            write_bundle(&d, &spec.bundle(rep)?)?;
            Ok(d)
        })
        .collect()
}
