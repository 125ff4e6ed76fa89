use std::path::{Path, PathBuf};
use std::process::Command;

use tspf_cli::commands::{METRICS_FILE, TABLE_JSON_FILE, TABLE_TEXT_FILE, TUNE_FILE};
use tspf_cli::{report, run, synth, tune, CliError, ExperimentConfig};
use tspf_core::eval::{Metrics, MetricsReport, ResultsTable};

const TINY: &str = r#"
seed = 7
replications = 2

[dataset]
name = "synthetic"
n = 300
d = 3
c = 4
rct_fraction = 0.2

[train]
r = 4
r_u = 2
hidden = 6
g_hidden = 8
q_hidden = 4
epochs_stage1 = 3
epochs_stage2 = 3
batch_size = 32
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("exp.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn parse(text: &str) -> Result<ExperimentConfig, CliError> {
    ExperimentConfig::parse(text, Path::new("exp.toml"))
}

#[test]
fn unknown_key_error_names_line_and_key() {
    let text =
        "seed = 1\n[dataset]\nname = \"synthetic\"\nn = 10\nd = 2\nrct_fraction = 0.1\nbogus = 3\n";
    let msg = parse(text).unwrap_err().to_string();
    assert!(msg.contains("line 7"), "{msg}");
    assert!(msg.contains("bogus"), "{msg}");
}

#[test]
fn type_error_names_line() {
    let text =
        "seed = \"seven\"\n[dataset]\nname = \"synthetic\"\nn = 10\nd = 2\nrct_fraction = 0.1\n";
    let msg = parse(text).unwrap_err().to_string();
    assert!(msg.contains("line 1"), "{msg}");
}

#[test]
fn semantic_error_names_line_and_key() {
    let text =
        "replications = 1\n[dataset]\nname = \"synthetic\"\nn = 10\nd = 2\nrct_fraction = 1.5\n";
    match parse(text).unwrap_err() {
        CliError::Invalid { line, key, .. } => {
            assert_eq!(line, 6);
            assert_eq!(key, "dataset.rct_fraction");
        }
        e => panic!("unexpected error {e}"),
    }
}

#[test]
fn lambda_grid_outside_search_range_is_rejected() {
    for bad in ["0.5", "1e-6", "-0.01"] {
        let text = format!("[dataset]\nname = \"synthetic\"\nn = 10\nd = 2\nrct_fraction = 0.1\n[tune]\nmi = [0.01, {bad}]\n");
        let msg = parse(&text).unwrap_err().to_string();
        assert!(msg.contains("line 7"), "{msg}");
    }
    let ok = "[dataset]\nname = \"synthetic\"\nn = 10\nd = 2\nrct_fraction = 0.1\n[tune]\nmi = [1e-5, 0.1]\n";
    assert_eq!(parse(ok).unwrap().tune.unwrap().grid.mi, vec![1e-5, 0.1]);
}

#[test]
fn covariate_path_resolves_relative_to_config() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cov.csv"), "x1\n1\n").unwrap();
    let p = write_config(
        dir.path(),
        "[dataset]\nname = \"ihdp\"\npath = \"cov.csv\"\nrct_fraction = 0.1\n",
    );
    let c = ExperimentConfig::load(&p).unwrap();
    assert_eq!(c.dataset.path.unwrap(), dir.path().join("cov.csv"));
}

#[test]
fn missing_covariate_file_exits_nonzero_and_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(
        dir.path(),
        "[dataset]\nname = \"ihdp\"\npath = \"absent/ihdp.csv\"\nrct_fraction = 0.1\n",
    );
    let out = Command::new(env!("CARGO_BIN_EXE_tspf"))
        .args(["run", "--config"])
        .arg(&p)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("absent/ihdp.csv"), "{err}");
}

#[test]
fn run_writes_all_artifacts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::load(&write_config(dir.path(), TINY)).unwrap();
    let a = run(&cfg, &dir.path().join("a"), 1).unwrap();
    let b = run(&cfg, &dir.path().join("b"), 2).unwrap();
    let ma = std::fs::read(a.dir.join(METRICS_FILE)).unwrap();
    let mb = std::fs::read(b.dir.join(METRICS_FILE)).unwrap();
    assert_eq!(ma, mb);
    for f in [
        "manifest.json",
        TABLE_TEXT_FILE,
        TABLE_JSON_FILE,
        "pehe_by_seed.csv",
        "pehe_by_seed.svg",
    ] {
        assert!(a.dir.join(f).is_file(), "{f}");
    }
    for rep in ["rep_000", "rep_001"] {
        for f in [
            "tspf_stage1.ckpt.json",
            "tspf_stage2.ckpt.json",
            "losses_stage1.csv",
            "loss_curves.svg",
        ] {
            assert!(a.dir.join(rep).join(f).is_file(), "{rep}/{f}");
        }
    }
    assert_eq!(a.reports.len(), 4);
    assert!(a.failed.is_empty());
}

#[test]
fn loss_csv_has_one_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::load(&write_config(dir.path(), TINY)).unwrap();
    cfg.replications = 1;
    cfg.train.patience = 0;
    let s = run(&cfg, &dir.path().join("o"), 1).unwrap();
    let text = std::fs::read_to_string(s.dir.join("rep_000/losses_stage1.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 3);
}

#[test]
fn every_replication_failing_is_an_error_but_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace("[train]\n", "[train]\nlr = 1e300\n");
    let cfg = ExperimentConfig::load(&write_config(dir.path(), &text)).unwrap();
    let out = dir.path().join("o");
    assert!(run(&cfg, &out, 1).is_err());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["failed"].as_array().unwrap().len(), 2);
    assert!(report(&out).is_err());
}

#[test]
fn tune_single_point_grid_returns_that_point() {
    let dir = tempfile::tempdir().unwrap();
    let text =
        format!("{TINY}\n[tune]\nrec = [0.001]\nunb = [0.002]\nmi = [0.003]\nshift = [0.004]\n");
    let cfg = ExperimentConfig::load(&write_config(dir.path(), &text)).unwrap();
    let r = tune(&cfg, &dir.path().join("t"), 1).unwrap();
    assert_eq!(r.best.as_array(), [0.001, 0.002, 0.003, 0.004]);
    assert_eq!(r.candidates, 1);
    assert!(dir.path().join("t").join(TUNE_FILE).is_file());
}

#[test]
fn tune_candidate_count_matches_grid_cardinality() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{TINY}\n[tune]\nrec = [0.001, 0.01]\nshift = [1e-5, 0.01, 0.1]\n");
    let cfg = ExperimentConfig::load(&write_config(dir.path(), &text)).unwrap();
    let r = tune(&cfg, &dir.path().join("t"), 2).unwrap();
    assert_eq!(r.candidates, 6);
    let best = r
        .outcome
        .candidates
        .iter()
        .filter_map(|c| c.score)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(r.best_score, best);
}

#[test]
fn tune_without_section_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::load(&write_config(dir.path(), TINY)).unwrap();
    assert!(matches!(tune(&cfg, dir.path(), 1), Err(CliError::Usage(_))));
}

fn fake_report(model: &str, pehe_out: &[f64]) -> MetricsReport {
    let reps = pehe_out
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            (
                i,
                Metrics {
                    pehe_in: 1.0,
                    pehe_out: p,
                    ate_in: 0.5,
                    ate_out: 0.25,
                },
            )
        })
        .collect();
    MetricsReport::aggregate(model, "h", reps, Vec::new())
}

fn write_metrics(dir: &Path, reports: &[MetricsReport]) {
    std::fs::write(
        dir.join(METRICS_FILE),
        serde_json::to_string(reports).unwrap(),
    )
    .unwrap();
}

#[test]
fn report_single_method_gives_single_row() {
    let dir = tempfile::tempdir().unwrap();
    write_metrics(dir.path(), &[fake_report("tspf", &[0.3, 0.5])]);
    let t = report(dir.path()).unwrap();
    assert_eq!(t.rows.len(), 1);
    assert!(t.rows[0].cells.iter().all(|c| c.best));
    let back: ResultsTable =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(TABLE_JSON_FILE)).unwrap())
            .unwrap();
    assert_eq!(back, t);
}

#[test]
fn report_marks_every_tied_best_entry() {
    let dir = tempfile::tempdir().unwrap();
    // 0.404 and 0.396 both round to 0.40.
    write_metrics(
        dir.path(),
        &[
            fake_report("a", &[0.404]),
            fake_report("b", &[0.396]),
            fake_report("c", &[0.9]),
        ],
    );
    let t = report(dir.path()).unwrap();
    let col = 2;
    assert!(t.rows[0].cells[col].best && t.rows[1].cells[col].best);
    assert!(!t.rows[2].cells[col].best);
    let text = std::fs::read_to_string(dir.path().join(TABLE_TEXT_FILE)).unwrap();
    assert_eq!(text.matches("0.40 ± 0.00 *").count(), 2);
}

#[test]
fn report_numbers_are_metrics_rounded_to_two_decimals() {
    let dir = tempfile::tempdir().unwrap();
    let r = fake_report("tspf", &[0.123, 0.456, 0.2]);
    write_metrics(dir.path(), std::slice::from_ref(&r));
    let t = report(dir.path()).unwrap();
    let mean = (0.123 + 0.456 + 0.2) / 3.0;
    let var = [0.123f64, 0.456, 0.2]
        .iter()
        .map(|v| (v - mean).powi(2))
        .sum::<f64>()
        / 2.0;
    assert_eq!(t.rows[0].cells[2].mean, format!("{mean:.2}"));
    assert_eq!(t.rows[0].cells[2].std, format!("{:.2}", var.sqrt()));
}

#[test]
fn report_without_runs_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(report(dir.path()).is_err());
    write_metrics(
        dir.path(),
        &[MetricsReport::aggregate(
            "tspf",
            "h",
            Vec::new(),
            Vec::new(),
        )],
    );
    assert!(report(dir.path()).is_err());
}

#[test]
fn synth_writes_splits_per_replication() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::load(&write_config(dir.path(), TINY)).unwrap();
    let dirs = synth(&cfg, &dir.path().join("s")).unwrap();
    assert_eq!(dirs.len(), 2);
    for d in dirs {
        for f in [
            "obs_train.csv",
            "rct_train.csv",
            "validation.csv",
            "test.csv",
            "synthesis.json",
        ] {
            assert!(d.join(f).is_file());
        }
    }
}

#[test]
fn seed_flag_and_output_root_env_are_honoured() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), TINY);
    let root = dir.path().join("root");
    let status = Command::new(env!("CARGO_BIN_EXE_tspf"))
        .args(["synth", "--seed", "11", "--config"])
        .arg(&p)
        .env("TSPF_OUTPUT_ROOT", &root)
        .status()
        .unwrap();
    assert!(status.success());
    let side = std::fs::read_to_string(root.join("exp/rep_000/synthesis.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&side).unwrap();
    let mut cfg = ExperimentConfig::load(&p).unwrap();
    cfg.seed = 11;
    let expected = cfg.pipeline().unwrap().replication_seed(0);
    assert_eq!(v["seed"].as_u64().unwrap(), expected);
}
