//! One-stage comparators fitted on the pooled observational and trial rows.

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint::{Checkpoint, Manifest};
use crate::data::{batches, Dataset, OBS};
use crate::error::{Error, Result};
use crate::nn::MlpParams;
use crate::optim::{optimizer_step, AdamConfig, OptimState};
use crate::rng::{derive_seed, seeded, stream};
use crate::tensor::Tensor;
use crate::tspf::{
    fit_stage1, init_stage1, predict_cate_stage1, Selector, Stage1Model, TrainConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    TLearner,
    SLearner,
    Stage1Only,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::TLearner => "t_learner",
            BaselineKind::SLearner => "s_learner",
            BaselineKind::Stage1Only => "stage1_only",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BaselineNets {
    /// Control and treated regressors.
    Two {
        net0: MlpParams,
        net1: MlpParams,
    },
    /// One regressor over `[x, t]`.
    One {
        net: MlpParams,
    },
    Stage1(Stage1Model),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub kind: BaselineKind,
    pub nets: BaselineNets,
    pub config: TrainConfig,
}

/// `[input, hidden, r, hidden.., 1]`: the same depth and widths as the
/// representation followed by one outcome head.
pub fn regressor_widths(input: usize, cfg: &TrainConfig) -> Vec<usize> {
    let mut w = vec![input, cfg.hidden, cfg.r];
    w.extend(std::iter::repeat_n(cfg.hidden, cfg.l_p - 1));
    w.push(1);
    w
}

fn with_t(x: &Tensor, t: f64) -> Tensor {
    x.concat_cols(&Tensor::column(vec![t; x.rows()]))
        .expect("same rows")
}

fn check_arms(pool: &Dataset) -> Result<()> {
    for arm in [0, 1] {
        if !pool.t.contains(&arm) {
            return Err(Error::contract(format!(
                "pooled data has no rows with t = {arm}"
            )));
        }
    }
    Ok(())
}

fn mse(net: &MlpParams, x: &Tensor, y: &[f64]) -> Result<f64> {
    let p = net.forward(x)?;
    Ok(p.values()
        .iter()
        .zip(y)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / y.len().max(1) as f64)
}

/// Mini-batch Adam on mean squared error, keeping the epoch with the lowest
/// validation error when one is given.
pub fn fit_regressor(
    mut net: MlpParams,
    x: &Tensor,
    y: &[f64],
    validation: Option<(&Tensor, &[f64])>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<MlpParams> {
    if x.rows() != y.len() {
        return Err(Error::contract(format!(
            "{} rows vs {} targets",
            x.rows(),
            y.len()
        )));
    }
    if cfg.epochs_stage1 == 0 {
        return Ok(net);
    }
    let mut opt = OptimState::new(&net, AdamConfig::with_lr(cfg.lr));
    let mut sel = Selector::new(cfg.patience);
    let validation = validation.filter(|(_, vy)| !vy.is_empty());
    if let Some((vx, vy)) = validation {
        sel.observe(0, mse(&net, vx, vy)?, &net);
    }
    let mut last = 0;
    for epoch in 1..=cfg.epochs_stage1 {
        for idx in batches(y.len(), cfg.batch_size, seed, epoch)? {
            let mut g = Graph::new();
            let xb = g.constant(x.select_rows(&idx));
            let yb = g.constant(Tensor::column(idx.iter().map(|&i| y[i]).collect()));
            let bound = net.bind(&mut g);
            let p = bound.forward(&mut g, xb)?;
            let r = g.sub(p, yb)?;
            let sq = g.square(r);
            let loss = g.mean(sq);
            let v = g.value(loss).item()?;
            if !v.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    what: "baseline regression loss".into(),
                });
            }
            let grads = g.backward(loss)?;
            optimizer_step(&mut net, bound.grads(&grads).as_deref(), &mut opt)?;
        }
        last = epoch;
        if let Some((vx, vy)) = validation {
            if sel.observe(epoch, mse(&net, vx, vy)?, &net) {
                break;
            }
        }
    }
    Ok(sel.finish(net, last).0)
}

fn arm(ds: &Dataset, t: u8) -> (Tensor, Vec<f64>) {
    let idx = ds.indices_with_t(t);
    (
        ds.x.select_rows(&idx),
        idx.iter().map(|&i| ds.y[i]).collect(),
    )
}

/// Separate control and treated regressors.
pub fn train_t_learner(
    pool: &Dataset,
    validation: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<BaselineModel> {
    cfg.validate()?;
    check_arms(pool)?;
    let mut rng = seeded(cfg.seed, stream::INIT_BASELINE);
    let widths = regressor_widths(pool.dim(), cfg);
    let mut nets = Vec::with_capacity(2);
    for t in [0u8, 1] {
        let init = MlpParams::init(&widths, cfg.activation, &mut rng)?;
        let (x, y) = arm(pool, t);
        let val = validation.map(|v| arm(v, t));
        let seed = derive_seed(cfg.seed, 100 + u64::from(t));
        nets.push(fit_regressor(
            init,
            &x,
            &y,
            val.as_ref().map(|(a, b)| (a, b.as_slice())),
            cfg,
            seed,
        )?);
    }
    let net1 = nets.pop().expect("two nets");
    let net0 = nets.pop().expect("two nets");
    Ok(BaselineModel {
        kind: BaselineKind::TLearner,
        nets: BaselineNets::Two { net0, net1 },
        config: cfg.clone(),
    })
}

/// One regressor with the treatment indicator as an extra input column.
pub fn train_s_learner(
    pool: &Dataset,
    validation: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<BaselineModel> {
    cfg.validate()?;
    check_arms(pool)?;
    let mut rng = seeded(cfg.seed, stream::INIT_BASELINE);
    let init = MlpParams::init(
        &regressor_widths(pool.dim() + 1, cfg),
        cfg.activation,
        &mut rng,
    )?;
    let xt = |ds: &Dataset| {
        ds.x.concat_cols(&Tensor::column(ds.t_f64()))
            .expect("same rows")
    };
    let x = xt(pool);
    let val = validation.map(|v| (xt(v), v.y.clone()));
    let net = fit_regressor(
        init,
        &x,
        &pool.y,
        val.as_ref().map(|(a, b)| (a, b.as_slice())),
        cfg,
        derive_seed(cfg.seed, 102),
    )?;
    Ok(BaselineModel {
        kind: BaselineKind::SLearner,
        nets: BaselineNets::One { net },
        config: cfg.clone(),
    })
}

/// Stage-1 pretraining on the pooled rows, read out through the pretrained
/// heads.
pub fn stage1_only(
    pool: &Dataset,
    validation: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<BaselineModel> {
    check_arms(pool)?;
    let mut pooled = pool.clone();
    pooled.g.iter_mut().for_each(|g| *g = OBS);
    let init = init_stage1(pool.dim(), cfg)?;
    let (m, _) = fit_stage1(init, &pooled, validation, cfg)?;
    Ok(BaselineModel {
        kind: BaselineKind::Stage1Only,
        nets: BaselineNets::Stage1(m),
        config: cfg.clone(),
    })
}

impl BaselineModel {
    pub fn predict_cate(&self, x: &Tensor) -> Result<Vec<f64>> {
        match &self.nets {
            BaselineNets::Two { net0, net1 } => {
                let (a, b) = (net0.forward(x)?, net1.forward(x)?);
                Ok(b.values()
                    .iter()
                    .zip(a.values())
                    .map(|(p, q)| p - q)
                    .collect())
            }
            BaselineNets::One { net } => {
                let a = net.forward(&with_t(x, 0.0))?;
                let b = net.forward(&with_t(x, 1.0))?;
                Ok(b.values()
                    .iter()
                    .zip(a.values())
                    .map(|(p, q)| p - q)
                    .collect())
            }
            BaselineNets::Stage1(m) => predict_cate_stage1(m, x),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let manifest = Manifest {
            stage: self.kind.name().into(),
            config_hash: self.config.hash(),
            ..Default::default()
        };
        match &self.nets {
            BaselineNets::Two { net0, net1 } => Checkpoint::new(manifest)
                .with("net0", net0)
                .with("net1", net1),
            BaselineNets::One { net } => Checkpoint::new(manifest).with("net", net),
            BaselineNets::Stage1(m) => {
                let mut c = m.to_checkpoint(&manifest.config_hash);
                c.manifest = manifest;
                c
            }
        }
    }
}
