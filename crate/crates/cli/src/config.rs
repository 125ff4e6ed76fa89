//! TOML experiment configuration.
//!
//! ```toml
//! seed = 2024
//! replications = 10
//! methods = ["tspf", "stage1_only", "t_learner", "s_learner"]
//!
//! [dataset]
//! name = "synthetic"      # or "ihdp" / "jobs" with `path = "covariates.csv"`
//! n = 3493
//! d = 10
//! c = 30
//! rct_fraction = 0.0909090909090909
//!
//! [train]
//! epochs_stage1 = 60
//! lambdas = { rec = 0.01, unb = 0.01, mi = 0.01, shift = 0.01 }
//!
//! [tune]
//! mode = "coordinate"
//! shift = [1e-5, 1e-3, 0.1]
//! ```
//!
//! A `[tune]` axis left out is held at the `[train]` value.
//! Relative paths resolve against the directory holding the config file.

use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};
use toml::Spanned;
use tspf_core::data::{load_covariates, CovariateSchema};
use tspf_core::experiment::{Covariates, LambdaGrid, Method, PipelineSpec, TuneMode};
use tspf_core::tspf::TrainConfig;

use crate::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Ihdp,
    Jobs,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetConfig {
    pub name: DatasetName,
    /// Covariate CSV; required for `ihdp` and `jobs`.
    pub path: Option<PathBuf>,
    /// Rows and columns of generated covariates (`synthetic` only).
    pub n: Option<usize>,
    pub d: Option<usize>,
    /// Number of hidden confounders.
    pub c: usize,
    pub rct_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TuneConfig {
    pub mode: TuneMode,
    pub grid: LambdaGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub replications: usize,
    pub workers: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub methods: Vec<Method>,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub tune: Option<TuneConfig>,
    #[serde(skip)]
    pub source: PathBuf,
}

const DEFAULT_REPLICATIONS: usize = 10;

fn default_c() -> usize {
    30
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    seed: u64,
    replications: Option<Spanned<usize>>,
    workers: Option<usize>,
    output_dir: Option<PathBuf>,
    methods: Option<Spanned<Vec<Method>>>,
    dataset: Spanned<RawDataset>,
    train: Option<Spanned<TrainConfig>>,
    tune: Option<RawTune>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    name: DatasetName,
    path: Option<Spanned<PathBuf>>,
    n: Option<Spanned<usize>>,
    d: Option<Spanned<usize>>,
    #[serde(default = "default_c")]
    c: usize,
    rct_fraction: Spanned<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTune {
    #[serde(default)]
    mode: TuneMode,
    #[serde(default, deserialize_with = "grid_axis")]
    rec: Option<Vec<f64>>,
    #[serde(default, deserialize_with = "grid_axis")]
    unb: Option<Vec<f64>>,
    #[serde(default, deserialize_with = "grid_axis")]
    mi: Option<Vec<f64>>,
    #[serde(default, deserialize_with = "grid_axis")]
    shift: Option<Vec<f64>>,
}

/// Rejects λ values outside the search range while the parser still knows
/// where the offending key is.
fn grid_axis<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<Vec<f64>>, D::Error> {
    let v = Vec::<f64>::deserialize(d)?;
    let (lo, hi) = LambdaGrid::RANGE;
    if let Some(bad) = v.iter().find(|x| !(lo..=hi).contains(*x)) {
        return Err(serde::de::Error::custom(format!(
            "lambda {bad} outside [{lo}, {hi}]"
        )));
    }
    Ok(Some(v))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text, path)
    }

    /// Parses `text` as if read from `path` and checks every constraint
    /// that can be checked without training, including that referenced
    /// files exist.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| CliError::Parse {
            path: path.to_path_buf(),
            msg: e.to_string().trim_end().to_string(),
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let invalid = |span: Range<usize>, key: &str, msg: String| CliError::Invalid {
            path: path.to_path_buf(),
            line: line_of(text, span.start),
            key: key.to_string(),
            msg,
        };

        let replications = match raw.replications {
            Some(r) if *r.get_ref() == 0 => {
                return Err(invalid(
                    r.span(),
                    "replications",
                    "must be at least 1".into(),
                ))
            }
            Some(r) => r.into_inner(),
            None => DEFAULT_REPLICATIONS,
        };
        let methods = match raw.methods {
            Some(m) if m.get_ref().is_empty() => {
                return Err(invalid(m.span(), "methods", "must not be empty".into()))
            }
            Some(m) => m.into_inner().into_iter().fold(Vec::new(), |mut v, x| {
                if !v.contains(&x) {
                    v.push(x);
                }
                v
            }),
            None => Method::ALL.to_vec(),
        };
        let dspan = raw.dataset.span();
        let ds = raw.dataset.into_inner();
        let fraction = *ds.rct_fraction.get_ref();
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(invalid(
                ds.rct_fraction.span(),
                "dataset.rct_fraction",
                format!("must lie in (0, 1), got {fraction}"),
            ));
        }
        if ds.c == 0 {
            return Err(invalid(dspan, "dataset.c", "must be at least 1".into()));
        }
        let resolved = ds.path.as_ref().map(|p| (p.span(), base.join(p.get_ref())));
        match ds.name {
            DatasetName::Synthetic => {
                if let Some((span, _)) = resolved {
                    return Err(invalid(
                        span,
                        "dataset.path",
                        "synthetic datasets take `n` and `d`, not a file".into(),
                    ));
                }
                for (key, v) in [("dataset.n", &ds.n), ("dataset.d", &ds.d)] {
                    match v {
                        None => {
                            return Err(invalid(
                                dspan.clone(),
                                key,
                                "required for synthetic datasets".into(),
                            ))
                        }
                        Some(s) if *s.get_ref() == 0 => {
                            return Err(invalid(s.span(), key, "must be at least 1".into()))
                        }
                        Some(_) => {}
                    }
                }
            }
            DatasetName::Ihdp | DatasetName::Jobs => {
                for (key, v) in [("dataset.n", &ds.n), ("dataset.d", &ds.d)] {
                    if let Some(s) = v {
                        return Err(invalid(
                            s.span(),
                            key,
                            "only used by synthetic datasets".into(),
                        ));
                    }
                }
                match &resolved {
                    None => {
                        return Err(invalid(
                            dspan,
                            "dataset.path",
                            "required for ihdp and jobs".into(),
                        ))
                    }
                    Some((span, p)) if !p.is_file() => {
                        return Err(invalid(
                            span.clone(),
                            "dataset.path",
                            format!("covariate file {} not found", p.display()),
                        ))
                    }
                    Some(_) => {}
                }
            }
        }
        let train = match raw.train {
            Some(t) => {
                let span = t.span();
                let t = t.into_inner();
                t.validate()
                    .map_err(|e| invalid(span, "train", e.to_string()))?;
                t
            }
            None => TrainConfig::default(),
        };

        let tune = raw.tune.map(|t| {
            let fixed = |v: f64| vec![v];
            TuneConfig {
                mode: t.mode,
                grid: LambdaGrid {
                    rec: t.rec.unwrap_or_else(|| fixed(train.lambdas.rec)),
                    unb: t.unb.unwrap_or_else(|| fixed(train.lambdas.unb)),
                    mi: t.mi.unwrap_or_else(|| fixed(train.lambdas.mi)),
                    shift: t.shift.unwrap_or_else(|| fixed(train.lambdas.shift)),
                },
            }
        });

        Ok(ExperimentConfig {
            seed: raw.seed,
            replications,
            workers: raw.workers,
            output_dir: raw.output_dir.map(|p| base.join(p)),
            methods,
            dataset: DatasetConfig {
                name: ds.name,
                path: resolved.map(|(_, p)| p),
                n: ds.n.map(Spanned::into_inner),
                d: ds.d.map(Spanned::into_inner),
                c: ds.c,
                rct_fraction: fraction,
            },
            train,
            tune,
            source: path.to_path_buf(),
        })
    }

    /// Loads covariates (if file-backed) and assembles the pipeline.
    pub fn pipeline(&self) -> Result<PipelineSpec> {
        let ds = &self.dataset;
        let covariates = match (ds.name, &ds.path) {
            (DatasetName::Synthetic, _) => Covariates::Synthetic {
                n: ds.n.unwrap_or_default(),
                d: ds.d.unwrap_or_default(),
            },
            (name, Some(path)) => {
                let schema = if name == DatasetName::Ihdp {
                    CovariateSchema::ihdp()
                } else {
                    CovariateSchema::jobs()
                };
                Covariates::Fixed(load_covariates(path, &schema)?.x)
            }
            (_, None) => unreachable!("checked at parse time"),
        };
        Ok(PipelineSpec {
            covariates,
            c: ds.c,
            rct_fraction: ds.rct_fraction,
            train: self.train.clone(),
            methods: self.methods.clone(),
            seed: self.seed,
        })
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_numbers_are_one_based() {
        assert_eq!(line_of("a\nb\nc", 0), 1);
        assert_eq!(line_of("a\nb\nc", 2), 2);
        assert_eq!(line_of("a\nb\nc", 4), 3);
    }

    #[test]
    fn minimal_synthetic_config_gets_defaults() {
        let text = "[dataset]\nname = \"synthetic\"\nn = 50\nd = 3\nrct_fraction = 0.2\n";
        let c = ExperimentConfig::parse(text, Path::new("x/exp.toml")).unwrap();
        assert_eq!(c.replications, 10);
        assert_eq!(c.methods, Method::ALL.to_vec());
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.dataset.c, 30);
        assert!(c.tune.is_none());
    }
}
