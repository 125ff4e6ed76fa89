//! End-to-end replications: synthesis, splits, both training stages, the
//! comparators, and evaluation. Also the λ search.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{stage1_only, train_s_learner, train_t_learner, BaselineModel};
use crate::data::{build_bundle, synthetic_covariates, Generated};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Failure, Metrics, MetricsReport};
use crate::rng::derive_seed;
use crate::tensor::Tensor;
use crate::tspf::{
    init_stage1, init_stage2_from_stage1, stage2_forward, train_stage1, train_stage2,
    validation_loss, History, Lambdas, Stage1Epoch, Stage1Model, Stage2Epoch, Stage2Model,
    TrainConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Tspf,
    Stage1Only,
    TLearner,
    SLearner,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Tspf,
        Method::Stage1Only,
        Method::TLearner,
        Method::SLearner,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Tspf => "tspf",
            Method::Stage1Only => "stage1_only",
            Method::TLearner => "t_learner",
            Method::SLearner => "s_learner",
        }
    }
}

/// Where covariates come from.
#[derive(Clone, Debug, PartialEq)]
pub enum Covariates {
    /// One fixed matrix shared by every replication.
    Fixed(Tensor),
    /// Fresh standard-normal rows per replication.
    Synthetic { n: usize, d: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineSpec {
    pub covariates: Covariates,
    pub c: usize,
    pub rct_fraction: f64,
    pub train: TrainConfig,
    pub methods: Vec<Method>,
    pub seed: u64,
}

impl PipelineSpec {
    /// Seed of replication `rep`; drives synthesis, splits and initialisation.
    pub fn replication_seed(&self, rep: usize) -> u64 {
        derive_seed(self.seed, 1000 + rep as u64)
    }

    pub fn bundle(&self, rep: usize) -> Result<Generated> {
        let seed = self.replication_seed(rep);
        match &self.covariates {
            Covariates::Fixed(x) => build_bundle(x, self.c, self.rct_fraction, seed),
            Covariates::Synthetic { n, d } => build_bundle(
                &synthetic_covariates(*n, *d, seed),
                self.c,
                self.rct_fraction,
                seed,
            ),
        }
    }

    pub fn config_for(&self, rep: usize) -> TrainConfig {
        TrainConfig {
            seed: self.replication_seed(rep),
            ..self.train.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct TspfFit {
    pub stage1: Stage1Model,
    pub stage2: Stage2Model,
    pub history1: History<Stage1Epoch>,
    pub history2: History<Stage2Epoch>,
}

/// Both stages on one bundle, with validation-based selection.
pub fn fit_tspf(generated: &Generated, cfg: &TrainConfig) -> Result<TspfFit> {
    let b = &generated.bundle;
    let s1 = init_stage1(b.obs_train.dim(), cfg)?;
    let (stage1, history1) = train_stage1(s1, &b.obs_train, Some(&b.validation), cfg)?;
    let s2 = init_stage2_from_stage1(&stage1, cfg)?;
    let (stage2, history2) = train_stage2(s2, &b.rct_train, Some(&b.validation), cfg)?;
    Ok(TspfFit {
        stage1,
        stage2,
        history1,
        history2,
    })
}

#[derive(Clone, Debug)]
pub struct ReplicationOutput {
    pub index: usize,
    pub seed: u64,
    pub metrics: BTreeMap<Method, Metrics>,
    pub tspf: Option<TspfFit>,
    pub baselines: Vec<BaselineModel>,
}

pub fn run_replication(spec: &PipelineSpec, rep: usize) -> Result<ReplicationOutput> {
    let generated = spec.bundle(rep)?;
    let cfg = spec.config_for(rep);
    let b = &generated.bundle;
    let pool = b.train_pool()?;
    let mut out = ReplicationOutput {
        index: rep,
        seed: cfg.seed,
        metrics: BTreeMap::new(),
        tspf: None,
        baselines: Vec::new(),
    };
    for &method in &spec.methods {
        match method {
            Method::Tspf => {
                let fit = fit_tspf(&generated, &cfg)?;
                out.metrics.insert(method, evaluate(&fit.stage2, b)?);
                out.tspf = Some(fit);
            }
            Method::Stage1Only | Method::TLearner | Method::SLearner => {
                let m = match method {
                    Method::Stage1Only => stage1_only(&pool, Some(&b.validation), &cfg)?,
                    Method::TLearner => train_t_learner(&pool, Some(&b.validation), &cfg)?,
                    _ => train_s_learner(&pool, Some(&b.validation), &cfg)?,
                };
                out.metrics.insert(method, evaluate(&m, b)?);
                out.baselines.push(m);
            }
        }
    }
    Ok(out)
}

#[derive(Debug)]
pub struct RunOutcome {
    pub completed: Vec<ReplicationOutput>,
    pub failed: Vec<Failure>,
}

impl RunOutcome {
    pub fn reports(&self, spec: &PipelineSpec) -> Vec<MetricsReport> {
        let hash = spec.train.hash();
        spec.methods
            .iter()
            .map(|&m| {
                let reps = self
                    .completed
                    .iter()
                    .filter_map(|r| r.metrics.get(&m).map(|v| (r.index, *v)))
                    .collect();
                MetricsReport::aggregate(m.name(), &hash, reps, self.failed.clone())
            })
            .collect()
    }
}

/// Runs `replications` replications on up to `workers` threads. A
/// replication that fails is recorded and the rest continue.
pub fn run_replications(
    spec: &PipelineSpec,
    replications: usize,
    workers: usize,
) -> Result<RunOutcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::contract(format!("thread pool: {e}")))?;
    let results: Vec<(usize, Result<ReplicationOutput>)> = pool.install(|| {
        (0..replications)
            .into_par_iter()
            .map(|rep| (rep, run_replication(spec, rep)))
            .collect()
    });
    let mut outcome = RunOutcome {
        completed: Vec::new(),
        failed: Vec::new(),
    };
    for (rep, r) in results {
        match r {
            Ok(o) => outcome.completed.push(o),
            Err(e) => {
                log::warn!("replication {rep} failed: {e}");
                outcome.failed.push(Failure {
                    replication: rep,
                    reason: e.to_string(),
                })
            }
        }
    }
    Ok(outcome)
}

/// Candidate values per λ axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaGrid {
    pub rec: Vec<f64>,
    pub unb: Vec<f64>,
    pub mi: Vec<f64>,
    pub shift: Vec<f64>,
}

impl LambdaGrid {
    pub const RANGE: (f64, f64) = (1e-5, 0.1);

    pub fn uniform(values: &[f64]) -> Self {
        LambdaGrid {
            rec: values.to_vec(),
            unb: values.to_vec(),
            mi: values.to_vec(),
            shift: values.to_vec(),
        }
    }

    pub fn axes(&self) -> [&[f64]; 4] {
        [&self.rec, &self.unb, &self.mi, &self.shift]
    }

    pub fn check_range(&self) -> Result<()> {
        let (lo, hi) = Self::RANGE;
        for (name, axis) in ["rec", "unb", "mi", "shift"].iter().zip(self.axes()) {
            if let Some(v) = axis.iter().find(|v| !(lo..=hi).contains(*v)) {
                return Err(Error::contract(format!(
                    "lambda grid `{name}` value {v} outside [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    pub fn cartesian(&self) -> Vec<Lambdas> {
        let mut out = Vec::new();
        for &a in &self.rec {
            for &b in &self.unb {
                for &c in &self.mi {
                    for &d in &self.shift {
                        out.push(Lambdas::from_array([a, b, c, d]));
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneMode {
    #[default]
    Full,
    /// One axis at a time, holding the others at their current best.
    Coordinate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub lambdas: Lambdas,
    /// Validation loss; `None` when the candidate failed.
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub best: Lambdas,
    pub best_score: f64,
    pub candidates: Vec<Candidate>,
}

fn score(eval: &(dyn Fn(Lambdas) -> Result<f64> + Sync), l: Lambdas) -> Candidate {
    match eval(l) {
        Ok(s) if s.is_finite() => Candidate {
            lambdas: l,
            score: Some(s),
            error: None,
        },
        Ok(s) => Candidate {
            lambdas: l,
            score: None,
            error: Some(format!("non-finite score {s}")),
        },
        Err(e) => Candidate {
            lambdas: l,
            score: None,
            error: Some(e.to_string()),
        },
    }
}

fn pick(candidates: &[Candidate]) -> Option<(Lambdas, f64)> {
    let mut best: Option<(Lambdas, f64)> = None;
    for c in candidates {
        if let Some(s) = c.score {
            if best.is_none_or(|(_, b)| s < b) {
                best = Some((c.lambdas, s));
            }
        }
    }
    best
}

/// Lowest score wins; ties go to the earlier candidate.
pub fn tune_candidates(
    eval: &(dyn Fn(Lambdas) -> Result<f64> + Sync),
    candidates: &[Lambdas],
) -> Result<TuneOutcome> {
    if candidates.is_empty() {
        return Err(Error::contract("empty lambda grid"));
    }
    let scored: Vec<Candidate> = candidates.par_iter().map(|&l| score(eval, l)).collect();
    let (best, best_score) =
        pick(&scored).ok_or_else(|| Error::Numeric("every lambda candidate failed".into()))?;
    Ok(TuneOutcome {
        best,
        best_score,
        candidates: scored,
    })
}

pub fn tune_grid(
    eval: &(dyn Fn(Lambdas) -> Result<f64> + Sync),
    grid: &LambdaGrid,
    mode: TuneMode,
) -> Result<TuneOutcome> {
    if grid.axes().iter().any(|a| a.is_empty()) {
        return Err(Error::contract("empty lambda grid"));
    }
    match mode {
        TuneMode::Full => tune_candidates(eval, &grid.cartesian()),
        TuneMode::Coordinate => {
            let mut current = [grid.rec[0], grid.unb[0], grid.mi[0], grid.shift[0]];
            let mut seen: Vec<Candidate> = Vec::new();
            for (k, axis) in grid.axes().iter().enumerate() {
                let fresh: Vec<Lambdas> = axis
                    .iter()
                    .map(|&v| {
                        let mut l = current;
                        l[k] = v;
                        Lambdas::from_array(l)
                    })
                    .filter(|l| !seen.iter().any(|c| c.lambdas == *l))
                    .collect();
                let scored: Vec<Candidate> = fresh.par_iter().map(|&l| score(eval, l)).collect();
                seen.extend(scored);
                let on_axis: Vec<Candidate> = seen
                    .iter()
                    .filter(|c| {
                        let a = c.lambdas.as_array();
                        (0..4).all(|j| j == k || a[j] == current[j])
                    })
                    .cloned()
                    .collect();
                if let Some((l, _)) = pick(&on_axis) {
                    current = l.as_array();
                }
            }
            let (best, best_score) = pick(&seen)
                .ok_or_else(|| Error::Numeric("every lambda candidate failed".into()))?;
            Ok(TuneOutcome {
                best,
                best_score,
                candidates: seen,
            })
        }
    }
}

/// Validation loss of the stage-2 model trained with `lambdas` on the bundle
/// of replication `rep`.
pub fn tspf_validation_score(
    spec: &PipelineSpec,
    generated: &Generated,
    rep: usize,
    lambdas: Lambdas,
) -> Result<f64> {
    let cfg = TrainConfig {
        lambdas,
        ..spec.config_for(rep)
    };
    let fit = fit_tspf(generated, &cfg)?;
    let val = &generated.bundle.validation;
    let out = stage2_forward(&fit.stage2, &val.x)?;
    validation_loss(&out.y0, &out.y1, val)
}
