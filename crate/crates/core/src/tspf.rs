//! The two-stage estimator: representation pretraining on observational
//! rows, then finetuning of widened outcome heads on trial rows with the
//! pretrained representation frozen.

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::{Checkpoint, Manifest};
use crate::data::{batches, Dataset, OBS, RCT};
use crate::error::{Error, Result};
use crate::losses::{
    balancing_weights, club_mi, factual_loss, factual_prediction, ipm_wasserstein, q_nll,
    reconstruction_loss, shift_loss, BoundVariational, SinkhornConfig, VariationalCond,
};
use crate::nn::{Activation, BoundMlp, Linear, MlpParams};
use crate::optim::{optimizer_step, AdamConfig, OptimState};
use crate::rng::{derive_seed, seeded, stream};
use crate::tensor::Tensor;

/// Loss weights: reconstruction, balancing, mutual information, shift.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lambdas {
    pub rec: f64,
    pub unb: f64,
    pub mi: f64,
    pub shift: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Lambdas {
            rec: 1e-2,
            unb: 1e-2,
            mi: 1e-2,
            shift: 1e-2,
        }
    }
}

impl Lambdas {
    pub fn as_array(&self) -> [f64; 4] {
        [self.rec, self.unb, self.mi, self.shift]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Lambdas {
            rec: v[0],
            unb: v[1],
            mi: v[2],
            shift: v[3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambdas: Lambdas,
    pub lr: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    /// Representation width.
    pub r: usize,
    /// Adapter representation width.
    pub r_u: usize,
    /// Layers per outcome head.
    pub l_p: usize,
    /// Hidden width of the representation, decoder and stage-1 heads.
    pub hidden: usize,
    /// Hidden width of the stage-2 heads; at least `hidden`.
    pub g_hidden: usize,
    /// Hidden width of the variational conditional.
    pub q_hidden: usize,
    pub activation: Activation,
    pub seed: u64,
    pub sinkhorn: SinkhornConfig,
    pub q_inner_steps: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambdas: Lambdas::default(),
            lr: 1e-3,
            epochs_stage1: 300,
            epochs_stage2: 300,
            batch_size: 100,
            r: 64,
            r_u: 16,
            l_p: 2,
            hidden: 64,
            g_hidden: 80,
            q_hidden: 32,
            activation: Activation::Relu,
            seed: 0,
            sinkhorn: SinkhornConfig::default(),
            q_inner_steps: 5,
            patience: 30,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::contract(m));
        if self
            .lambdas
            .as_array()
            .iter()
            .any(|l| !(l.is_finite() && *l >= 0.0))
        {
            return bad(format!(
                "lambdas must be finite and non-negative, got {:?}",
                self.lambdas
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.batch_size < 2 {
            return bad(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            ));
        }
        for (name, v) in [
            ("r", self.r),
            ("r_u", self.r_u),
            ("l_p", self.l_p),
            ("hidden", self.hidden),
            ("g_hidden", self.g_hidden),
            ("q_hidden", self.q_hidden),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.lr)
    }

    fn head_widths(&self, input: usize, hidden: usize) -> Vec<usize> {
        let mut w = vec![input];
        w.extend(std::iter::repeat_n(hidden, self.l_p - 1));
        w.push(1);
        w
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Model {
    pub phi: MlpParams,
    pub psi: MlpParams,
    pub h0: MlpParams,
    pub h1: MlpParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Model {
    pub phi: MlpParams,
    pub psi: MlpParams,
    pub phi_u: MlpParams,
    pub g0: MlpParams,
    pub g1: MlpParams,
    pub q: VariationalCond,
    pub g0_init: MlpParams,
    pub g1_init: MlpParams,
}

pub fn init_stage1(d: usize, cfg: &TrainConfig) -> Result<Stage1Model> {
    if d == 0 {
        return Err(Error::contract("covariate dimension must be at least 1"));
    }
    cfg.validate()?;
    let mut rng = seeded(cfg.seed, stream::INIT_STAGE1);
    let act = cfg.activation;
    Ok(Stage1Model {
        phi: MlpParams::init(&[d, cfg.hidden, cfg.r], act, &mut rng)?,
        psi: MlpParams::init(&[cfg.r, cfg.hidden, d], act, &mut rng)?,
        h0: MlpParams::init(&cfg.head_widths(cfg.r, cfg.hidden), act, &mut rng)?,
        h1: MlpParams::init(&cfg.head_widths(cfg.r, cfg.hidden), act, &mut rng)?,
    })
}

/// Plain outputs `(z, x̂, ỹ0, ỹ1)`; the heads are `[n, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Output {
    pub z: Tensor,
    pub x_hat: Tensor,
    pub y0: Tensor,
    pub y1: Tensor,
}

pub fn stage1_forward(m: &Stage1Model, x: &Tensor) -> Result<Stage1Output> {
    let z = m.phi.forward(x)?;
    Ok(Stage1Output {
        x_hat: m.psi.forward(&z)?,
        y0: m.h0.forward(&z)?,
        y1: m.h1.forward(&z)?,
        z,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Output {
    pub z: Tensor,
    pub z_u: Tensor,
    pub y0: Tensor,
    pub y1: Tensor,
}

pub fn stage2_forward(m: &Stage2Model, x: &Tensor) -> Result<Stage2Output> {
    let z = m.phi.forward(x)?;
    let z_u = m.phi_u.forward(x)?;
    let c = z.concat_cols(&z_u)?;
    Ok(Stage2Output {
        y0: m.g0.forward(&c)?,
        y1: m.g1.forward(&c)?,
        z,
        z_u,
    })
}

/// Widens `h` into a head over `in_dim` inputs with hidden width `hidden`,
/// copying `h` into the top-left block of every layer and zeroing the rest.
pub fn embed_head(h: &MlpParams, in_dim: usize, hidden: usize) -> Result<MlpParams> {
    let last = h.depth() - 1;
    let mut layers = Vec::with_capacity(h.depth());
    for (l, hl) in h.layers.iter().enumerate() {
        let gin = if l == 0 { in_dim } else { hidden };
        let gout = if l == last { hl.out_dim() } else { hidden };
        if gin < hl.in_dim() || gout < hl.out_dim() {
            return Err(Error::contract(format!(
                "head layer {l}: widened shape {gout}x{gin} is narrower than the pretrained {}x{}",
                hl.out_dim(),
                hl.in_dim()
            )));
        }
        let mut gl = Linear::zeros(gin, gout);
        for i in 0..hl.out_dim() {
            for j in 0..hl.in_dim() {
                gl.weight.set(i, j, hl.weight.get(i, j));
            }
            gl.bias.values_mut()[i] = hl.bias.values()[i];
        }
        layers.push(gl);
    }
    MlpParams::new(layers, h.activation)
}

pub fn init_stage2_from_stage1(s1: &Stage1Model, cfg: &TrainConfig) -> Result<Stage2Model> {
    cfg.validate()?;
    let r = s1.phi.out_dim();
    let d = s1.phi.in_dim();
    let mut rng = seeded(cfg.seed, stream::INIT_STAGE2);
    let g0 = embed_head(&s1.h0, r + cfg.r_u, cfg.g_hidden)?;
    let g1 = embed_head(&s1.h1, r + cfg.r_u, cfg.g_hidden)?;
    Ok(Stage2Model {
        phi: s1.phi.clone().frozen(),
        psi: s1.psi.clone().frozen(),
        phi_u: MlpParams::init(&[d, cfg.r_u, cfg.r_u], cfg.activation, &mut rng)?,
        q: VariationalCond::init(r, cfg.r_u, cfg.q_hidden, &mut rng)?,
        g0_init: g0.clone(),
        g1_init: g1.clone(),
        g0,
        g1,
    })
}

fn difference(y1: &Tensor, y0: &Tensor) -> Vec<f64> {
    y1.values()
        .iter()
        .zip(y0.values())
        .map(|(a, b)| a - b)
        .collect()
}

/// `τ̂(x) = ŷ1(x) - ŷ0(x)`.
pub fn predict_cate(m: &Stage2Model, x: &Tensor) -> Result<Vec<f64>> {
    let out = stage2_forward(m, x)?;
    Ok(difference(&out.y1, &out.y0))
}

/// Pseudo-effect of the pretrained heads, `h1(φ(x)) - h0(φ(x))`.
pub fn predict_cate_stage1(m: &Stage1Model, x: &Tensor) -> Result<Vec<f64>> {
    let out = stage1_forward(m, x)?;
    Ok(difference(&out.y1, &out.y0))
}

/// Weighted squared error of the factual arm, without a tape.
pub fn weighted_factual_error(y0: &Tensor, y1: &Tensor, ds: &Dataset, w: &[f64]) -> f64 {
    let n = ds.len().max(1) as f64;
    (0..ds.len())
        .map(|i| {
            let p = if ds.t[i] == 1 {
                y1.values()[i]
            } else {
                y0.values()[i]
            };
            w[i] * (ds.y[i] - p).powi(2)
        })
        .sum::<f64>()
        / n
}

/// Validation criterion for model selection: balanced factual error with
/// weights computed on the validation set itself.
pub fn validation_loss(y0: &Tensor, y1: &Tensor, val: &Dataset) -> Result<f64> {
    let w = balancing_weights(&val.t)?;
    Ok(weighted_factual_error(y0, y1, val, &w.w))
}

/// Keeps the parameters with the lowest validation loss and signals when
/// `patience` epochs pass without improvement.
pub(crate) struct Selector<M> {
    patience: usize,
    best: Option<(f64, usize, M)>,
    since: usize,
}

impl<M: Clone> Selector<M> {
    pub(crate) fn new(patience: usize) -> Self {
        Selector {
            patience,
            best: None,
            since: 0,
        }
    }

    /// Returns `true` when training should stop.
    pub(crate) fn observe(&mut self, epoch: usize, loss: f64, model: &M) -> bool {
        let improved = loss.is_finite() && self.best.as_ref().is_none_or(|(b, _, _)| loss < *b);
        if improved {
            self.best = Some((loss, epoch, model.clone()));
            self.since = 0;
        } else {
            self.since += 1;
        }
        self.patience > 0 && self.since >= self.patience
    }

    pub(crate) fn finish(self, last: M, last_epoch: usize) -> (M, usize) {
        match self.best {
            Some((_, e, m)) => (m, e),
            None => (last, last_epoch),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1Epoch {
    pub epoch: usize,
    pub total: f64,
    pub factual: f64,
    pub reconstruction: f64,
    pub balance: f64,
    pub validation: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2Epoch {
    pub epoch: usize,
    pub total: f64,
    pub factual: f64,
    pub mi: f64,
    pub shift: f64,
    pub q_nll: f64,
    pub validation: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History<E> {
    pub epochs: Vec<E>,
    /// Epoch whose parameters were kept; 0 means the initial parameters.
    pub selected_epoch: usize,
    /// Batches where one treatment arm was missing.
    pub single_arm_batches: usize,
}

/// One mini-batch of the stage-1 objective on a fresh tape.
pub struct Stage1Tape {
    pub graph: Graph,
    pub total: Var,
    pub factual: Var,
    pub reconstruction: Var,
    pub balance: Option<Var>,
    pub phi: BoundMlp,
    pub psi: BoundMlp,
    pub h0: BoundMlp,
    pub h1: BoundMlp,
}

/// `L_f + λ1·L_rec + λ2·L_unb` on `batch` with per-row weights `w`.
pub fn stage1_objective(
    m: &Stage1Model,
    batch: &Dataset,
    w: &[f64],
    cfg: &TrainConfig,
) -> Result<Stage1Tape> {
    let mut g = Graph::new();
    let x = g.constant(batch.x.clone());
    let y = g.constant(Tensor::column(batch.y.clone()));
    let wv = g.constant(Tensor::column(w.to_vec()));
    let (phi, psi, h0, h1) = (
        m.phi.bind(&mut g),
        m.psi.bind(&mut g),
        m.h0.bind(&mut g),
        m.h1.bind(&mut g),
    );

    let z = phi.forward(&mut g, x)?;
    let x_hat = psi.forward(&mut g, z)?;
    let y0 = h0.forward(&mut g, z)?;
    let y1 = h1.forward(&mut g, z)?;
    let pred = factual_prediction(&mut g, y0, y1, &batch.t_f64())?;
    let factual = factual_loss(&mut g, pred, y, wv)?;
    let reconstruction = reconstruction_loss(&mut g, x_hat, x)?;

    let z_src = if cfg.lambdas.unb == 0.0 {
        g.constant(g.value(z).clone())
    } else {
        z
    };
    let zt = g.select_rows(z_src, &batch.indices_with_t(1))?;
    let zc = g.select_rows(z_src, &batch.indices_with_t(0))?;
    let balance = ipm_wasserstein(&mut g, zt, zc, cfg.sinkhorn)?;

    let rec = g.scale(reconstruction, cfg.lambdas.rec);
    let mut total = g.add(factual, rec)?;
    if let Some(b) = balance {
        let b = g.scale(b, cfg.lambdas.unb);
        total = g.add(total, b)?;
    }
    Ok(Stage1Tape {
        graph: g,
        total,
        factual,
        reconstruction,
        balance,
        phi,
        psi,
        h0,
        h1,
    })
}

struct Stage1Optim {
    phi: OptimState,
    psi: OptimState,
    h0: OptimState,
    h1: OptimState,
}

fn check_finite(v: f64, epoch: usize, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence {
            epoch,
            what: what.to_string(),
        })
    }
}

/// Pretrains on observational rows. With `validation`, the epoch with the
/// lowest validation loss is kept and training stops after `patience`
/// epochs without improvement.
pub fn train_stage1(
    m: Stage1Model,
    obs: &Dataset,
    validation: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(Stage1Model, History<Stage1Epoch>)> {
    obs.require_group(OBS, "stage-1 training")?;
    fit_stage1(m, obs, validation, cfg)
}

/// Stage-1 loop without the group check, shared with the pooled ablation.
pub(crate) fn fit_stage1(
    mut m: Stage1Model,
    data: &Dataset,
    validation: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(Stage1Model, History<Stage1Epoch>)> {
    cfg.validate()?;
    if data.dim() != m.phi.in_dim() {
        return Err(Error::shape(
            "train_stage1",
            format!("model expects {} covariates", m.phi.in_dim()),
            format!("data has {}", data.dim()),
        ));
    }
    let mut hist = History::default();
    if cfg.epochs_stage1 == 0 {
        return Ok((m, hist));
    }
    if data.is_empty() {
        return Err(Error::contract("stage-1 training set is empty"));
    }
    let w = balancing_weights(&data.t)?.w;
    let adam = cfg.adam();
    let mut opt = Stage1Optim {
        phi: OptimState::new(&m.phi, adam),
        psi: OptimState::new(&m.psi, adam),
        h0: OptimState::new(&m.h0, adam),
        h1: OptimState::new(&m.h1, adam),
    };
    let mut sel = Selector::new(cfg.patience);
    let val_loss = |m: &Stage1Model, val: &Dataset| -> Result<f64> {
        let out = stage1_forward(m, &val.x)?;
        validation_loss(&out.y0, &out.y1, val)
    };
    if let Some(val) = validation {
        sel.observe(0, val_loss(&m, val)?, &m);
    }
    let batch_seed = derive_seed(cfg.seed, 1);
    let mut last_epoch = 0;
    for epoch in 1..=cfg.epochs_stage1 {
        let mut rec = Stage1Epoch {
            epoch,
            ..Default::default()
        };
        let parts = batches(data.len(), cfg.batch_size, batch_seed, epoch)?;
        for idx in &parts {
            let batch = data.select(idx);
            let wb: Vec<f64> = idx.iter().map(|&i| w[i]).collect();
            let tape = stage1_objective(&m, &batch, &wb, cfg)?;
            let g = &tape.graph;
            let total = check_finite(g.value(tape.total).item()?, epoch, "stage-1 objective")?;
            rec.total += total;
            rec.factual += g.value(tape.factual).item()?;
            rec.reconstruction += g.value(tape.reconstruction).item()?;
            match tape.balance {
                Some(b) => rec.balance += g.value(b).item()?,
                None => hist.single_arm_batches += 1,
            }
            let Stage1Tape {
                graph,
                total,
                phi,
                psi,
                h0,
                h1,
                ..
            } = tape;
            let grads = graph.backward(total)?;
            optimizer_step(&mut m.phi, phi.grads(&grads).as_deref(), &mut opt.phi)?;
            optimizer_step(&mut m.psi, psi.grads(&grads).as_deref(), &mut opt.psi)?;
            optimizer_step(&mut m.h0, h0.grads(&grads).as_deref(), &mut opt.h0)?;
            optimizer_step(&mut m.h1, h1.grads(&grads).as_deref(), &mut opt.h1)?;
        }
        let k = parts.len() as f64;
        rec.total /= k;
        rec.factual /= k;
        rec.reconstruction /= k;
        rec.balance /= k;
        last_epoch = epoch;
        let mut stop = false;
        if let Some(val) = validation {
            let v = val_loss(&m, val)?;
            rec.validation = Some(v);
            stop = sel.observe(epoch, v, &m);
        }
        debug!("stage 1 epoch {epoch}: {rec:?}");
        hist.epochs.push(rec);
        if stop {
            break;
        }
    }
    if hist.single_arm_batches > 0 {
        warn!(
            "stage 1: {} batches lacked one treatment arm",
            hist.single_arm_batches
        );
    }
    let (m, e) = sel.finish(m, last_epoch);
    hist.selected_epoch = e;
    Ok((m, hist))
}

/// One mini-batch of the stage-2 objective. `φ` and `q` enter as constants.
pub struct Stage2Tape {
    pub graph: Graph,
    pub total: Var,
    pub factual: Var,
    pub mi: Var,
    pub shift: Var,
    pub phi: BoundMlp,
    pub phi_u: BoundMlp,
    pub g0: BoundMlp,
    pub g1: BoundMlp,
}

/// `L_pred + λ3·L_MI + λ4·L_shift` on `batch`.
pub fn stage2_objective(
    m: &Stage2Model,
    batch: &Dataset,
    w: &[f64],
    cfg: &TrainConfig,
) -> Result<Stage2Tape> {
    let mut g = Graph::new();
    let x = g.constant(batch.x.clone());
    let y = g.constant(Tensor::column(batch.y.clone()));
    let wv = g.constant(Tensor::column(w.to_vec()));
    let phi = m.phi.bind(&mut g);
    let phi_u = m.phi_u.bind(&mut g);
    let g0 = m.g0.bind(&mut g);
    let g1 = m.g1.bind(&mut g);
    let q = m.q.bind_constant(&mut g);

    let z = phi.forward(&mut g, x)?;
    let z_u = phi_u.forward(&mut g, x)?;
    let c = g.concat_cols(z, z_u)?;
    let y0 = g0.forward(&mut g, c)?;
    let y1 = g1.forward(&mut g, c)?;
    let pred = factual_prediction(&mut g, y0, y1, &batch.t_f64())?;
    let factual = factual_loss(&mut g, pred, y, wv)?;
    let mi = club_mi(&mut g, z, z_u, &q)?;
    let shift = shift_loss(&mut g, &g0, &m.g0_init, &g1, &m.g1_init)?;

    let a = g.scale(mi, cfg.lambdas.mi);
    let b = g.scale(shift, cfg.lambdas.shift);
    let total = g.add(factual, a)?;
    let total = g.add(total, b)?;
    Ok(Stage2Tape {
        graph: g,
        total,
        factual,
        mi,
        shift,
        phi,
        phi_u,
        g0,
        g1,
    })
}

/// Fits `q` to the current `(z, z_u)` pairs of a batch; both are detached.
/// Returns the last negative log-likelihood.
fn fit_q(
    m: &mut Stage2Model,
    x: &Tensor,
    steps: usize,
    opt: &mut (OptimState, OptimState),
) -> Result<f64> {
    let z = m.phi.forward(x)?;
    let z_u = m.phi_u.forward(x)?;
    let mut last = f64::NAN;
    for _ in 0..steps {
        let mut g = Graph::new();
        let (zv, zuv) = (g.constant(z.clone()), g.constant(z_u.clone()));
        let bq: BoundVariational = m.q.bind(&mut g);
        let loss = q_nll(&mut g, zv, zuv, &bq)?;
        last = g.value(loss).item()?;
        let grads = g.backward(loss)?;
        optimizer_step(
            &mut m.q.mean_net,
            bq.mean.grads(&grads).as_deref(),
            &mut opt.0,
        )?;
        optimizer_step(
            &mut m.q.logvar_net,
            bq.logvar.grads(&grads).as_deref(),
            &mut opt.1,
        )?;
    }
    Ok(last)
}

/// Finetunes the adapter and widened heads on trial rows. `φ` stays
/// bitwise fixed.
pub fn train_stage2(
    mut m: Stage2Model,
    rct: &Dataset,
    validation: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(Stage2Model, History<Stage2Epoch>)> {
    rct.require_group(RCT, "stage-2 training")?;
    cfg.validate()?;
    if rct.dim() != m.phi.in_dim() {
        return Err(Error::shape(
            "train_stage2",
            format!("model expects {} covariates", m.phi.in_dim()),
            format!("data has {}", rct.dim()),
        ));
    }
    if !m.phi.frozen {
        return Err(Error::contract("stage-2 representation must be frozen"));
    }
    let mut hist = History::default();
    if cfg.epochs_stage2 == 0 {
        return Ok((m, hist));
    }
    if rct.is_empty() {
        return Err(Error::contract("stage-2 training set is empty"));
    }
    let w = balancing_weights(&rct.t)?.w;
    let adam = cfg.adam();
    let mut opt_phi = OptimState::new(&m.phi, adam);
    let mut opt_u = OptimState::new(&m.phi_u, adam);
    let mut opt_g0 = OptimState::new(&m.g0, adam);
    let mut opt_g1 = OptimState::new(&m.g1, adam);
    let mut opt_q = (
        OptimState::new(&m.q.mean_net, adam),
        OptimState::new(&m.q.logvar_net, adam),
    );

    let mut sel = Selector::new(cfg.patience);
    let val_loss = |m: &Stage2Model, val: &Dataset| -> Result<f64> {
        let out = stage2_forward(m, &val.x)?;
        validation_loss(&out.y0, &out.y1, val)
    };
    if let Some(val) = validation {
        sel.observe(0, val_loss(&m, val)?, &m);
    }
    let batch_seed = derive_seed(cfg.seed, 2);
    let mut last_epoch = 0;
    for epoch in 1..=cfg.epochs_stage2 {
        let mut rec = Stage2Epoch {
            epoch,
            ..Default::default()
        };
        let parts = batches(rct.len(), cfg.batch_size, batch_seed, epoch)?;
        for idx in &parts {
            let batch = rct.select(idx);
            let wb: Vec<f64> = idx.iter().map(|&i| w[i]).collect();
            rec.q_nll += fit_q(&mut m, &batch.x, cfg.q_inner_steps, &mut opt_q)?;
            let tape = stage2_objective(&m, &batch, &wb, cfg)?;
            let g = &tape.graph;
            rec.total += check_finite(g.value(tape.total).item()?, epoch, "stage-2 objective")?;
            rec.factual += g.value(tape.factual).item()?;
            rec.mi += g.value(tape.mi).item()?;
            rec.shift += g.value(tape.shift).item()?;
            let Stage2Tape {
                graph,
                total,
                phi,
                phi_u,
                g0,
                g1,
                ..
            } = tape;
            let grads = graph.backward(total)?;
            optimizer_step(&mut m.phi, phi.grads(&grads).as_deref(), &mut opt_phi)?;
            optimizer_step(&mut m.phi_u, phi_u.grads(&grads).as_deref(), &mut opt_u)?;
            optimizer_step(&mut m.g0, g0.grads(&grads).as_deref(), &mut opt_g0)?;
            optimizer_step(&mut m.g1, g1.grads(&grads).as_deref(), &mut opt_g1)?;
        }
        let k = parts.len() as f64;
        rec.total /= k;
        rec.factual /= k;
        rec.mi /= k;
        rec.shift /= k;
        rec.q_nll /= k;
        last_epoch = epoch;
        let mut stop = false;
        if let Some(val) = validation {
            let v = val_loss(&m, val)?;
            rec.validation = Some(v);
            stop = sel.observe(epoch, v, &m);
        }
        debug!("stage 2 epoch {epoch}: {rec:?}");
        hist.epochs.push(rec);
        if stop {
            break;
        }
    }
    let (m, e) = sel.finish(m, last_epoch);
    hist.selected_epoch = e;
    Ok((m, hist))
}

impl Stage1Model {
    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        let manifest = Manifest {
            stage: "stage1".into(),
            config_hash: config_hash.into(),
            ..Default::default()
        };
        Checkpoint::new(manifest)
            .with("phi", &self.phi)
            .with("psi", &self.psi)
            .with("h0", &self.h0)
            .with("h1", &self.h1)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.manifest.stage != "stage1" {
            return Err(Error::contract(format!(
                "expected a stage1 checkpoint, got `{}`",
                c.manifest.stage
            )));
        }
        Ok(Stage1Model {
            phi: c.get("phi")?,
            psi: c.get("psi")?,
            h0: c.get("h0")?,
            h1: c.get("h1")?,
        })
    }
}

impl Stage2Model {
    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        let manifest = Manifest {
            stage: "stage2".into(),
            config_hash: config_hash.into(),
            ..Default::default()
        };
        Checkpoint::new(manifest)
            .with("phi", &self.phi)
            .with("psi", &self.psi)
            .with("phi_u", &self.phi_u)
            .with("g0", &self.g0)
            .with("g1", &self.g1)
            .with("q_mean", &self.q.mean_net)
            .with("q_logvar", &self.q.logvar_net)
            .with("g0_init", &self.g0_init)
            .with("g1_init", &self.g1_init)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.manifest.stage != "stage2" {
            return Err(Error::contract(format!(
                "expected a stage2 checkpoint, got `{}`",
                c.manifest.stage
            )));
        }
        Ok(Stage2Model {
            phi: c.get("phi")?,
            psi: c.get("psi")?,
            phi_u: c.get("phi_u")?,
            g0: c.get("g0")?,
            g1: c.get("g1")?,
            q: VariationalCond {
                mean_net: c.get("q_mean")?,
                logvar_net: c.get("q_logvar")?,
            },
            g0_init: c.get("g0_init")?,
            g1_init: c.get("g1_init")?,
        })
    }
}
