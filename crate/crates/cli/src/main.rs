use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tspf_cli::{report, run, synth, tune, CliError, ExperimentConfig, Result};

/// Two-stage CATE estimation: experiment runner.
#[derive(Parser, Debug)]
#[command(name = "tspf", version, about)]
struct Cli {
    /// Root for output directories when neither `--out` nor `output_dir` is set.
    #[arg(
        long,
        env = "TSPF_OUTPUT_ROOT",
        default_value = "results",
        global = true
    )]
    output_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train every method over all replications and write results.
    Run(ExpArgs),
    /// Grid-search the loss weights on replication 0.
    Tune(ExpArgs),
    /// Re-render the results table of a finished run.
    Report {
        /// Directory written by `run`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the dataset splits only.
    Synth(ExpArgs),
}

#[derive(Args, Debug)]
struct ExpArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,

    /// Override the config's base seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Parallel replications (or tuning candidates).
    #[arg(long)]
    workers: Option<usize>,

    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ExpArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &ExperimentConfig, root: &Path) -> PathBuf {
        if let Some(o) = &self.out {
            return o.clone();
        }
        if let Some(o) = &cfg.output_dir {
            return o.clone();
        }
        let stem = self
            .config
            .file_stem()
            .map(|s| s.to_os_string())
            .unwrap_or_else(|| "experiment".into());
        root.join(stem)
    }

    fn workers(&self, cfg: &ExperimentConfig) -> usize {
        self.workers.or(cfg.workers).unwrap_or(1)
    }
}

fn main_inner(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(a) => {
            let cfg = a.load()?;
            let out = a.out_dir(&cfg, &cli.output_root);
            let s = run(&cfg, &out, a.workers(&cfg))?;
            if let Some(t) = &s.table {
                print!("{}", t.render_text());
            }
            for f in &s.failed {
                eprintln!("replication {} failed: {}", f.replication, f.reason);
            }
            println!("results in {}", s.dir.display());
        }
        Command::Tune(a) => {
            let cfg = a.load()?;
            let out = a.out_dir(&cfg, &cli.output_root);
            let r = tune(&cfg, &out, a.workers(&cfg))?;
            let b = r.best;
            println!(
                "best lambdas: rec={} unb={} mi={} shift={} (validation loss {:.6}, {} candidates)",
                b.rec, b.unb, b.mi, b.shift, r.best_score, r.candidates
            );
            println!(
                "report in {}",
                out.join(tspf_cli::commands::TUNE_FILE).display()
            );
        }
        Command::Report { out } => {
            let t = report(&out)?;
            print!("{}", t.render_text());
        }
        Command::Synth(a) => {
            let cfg = a.load()?;
            let out = a.out_dir(&cfg, &cli.output_root);
            for d in synth(&cfg, &out)? {
                println!("{}", d.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Core(inner) = &e {
                log::debug!("{inner:?}");
            }
            ExitCode::FAILURE
        }
    }
}
