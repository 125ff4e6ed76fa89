//! Training objectives. Every function here builds its value on a [`Graph`]
//! so gradients flow back to whatever parameters produced the inputs.

use std::f64::consts::PI;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, BoundMlp, MlpParams};
use crate::tensor::Tensor;

/// Bounds on the treated fraction used for weighting.
pub const U_CLAMP: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct BalancingWeights {
    /// Treated fraction after clamping.
    pub u: f64,
    pub w: Vec<f64>,
}

/// `w_i = t_i / (2u) + (1 - t_i) / (2(1 - u))` with `u = mean(t)` clamped to
/// `[1e-3, 1 - 1e-3]`.
pub fn balancing_weights(t: &[u8]) -> Result<BalancingWeights> {
    if t.is_empty() {
        return Err(Error::contract(
            "balancing weights of an empty treatment vector",
        ));
    }
    let raw = t.iter().map(|&v| f64::from(v)).sum::<f64>() / t.len() as f64;
    let u = raw.clamp(U_CLAMP, 1.0 - U_CLAMP);
    let w = t
        .iter()
        .map(|&v| {
            let v = f64::from(v);
            v / (2.0 * u) + (1.0 - v) / (2.0 * (1.0 - u))
        })
        .collect();
    Ok(BalancingWeights { u, w })
}

fn check_same_len(g: &Graph, a: Var, b: Var, what: &'static str) -> Result<()> {
    let (la, lb) = (g.value(a).len(), g.value(b).len());
    if la != lb {
        return Err(Error::contract(format!("{what}: length {la} vs {lb}")));
    }
    Ok(())
}

/// Prediction of each unit under its own treatment: `t·ŷ1 + (1 - t)·ŷ0`.
pub fn factual_prediction(g: &mut Graph, y0_hat: Var, y1_hat: Var, t: &[f64]) -> Result<Var> {
    let tv = g.constant(Tensor::column(t.to_vec()));
    let cv = g.constant(Tensor::column(t.iter().map(|v| 1.0 - v).collect()));
    let a = g.mul(y1_hat, tv)?;
    let b = g.mul(y0_hat, cv)?;
    g.add(a, b)
}

/// `(1/n) Σ w_i (y_i - pred_i)²`. All three are `[n, 1]`.
pub fn factual_loss(g: &mut Graph, pred: Var, y: Var, w: Var) -> Result<Var> {
    check_same_len(g, pred, y, "factual_loss")?;
    check_same_len(g, pred, w, "factual_loss")?;
    let r = g.sub(pred, y)?;
    let sq = g.square(r);
    let wsq = g.mul(sq, w)?;
    Ok(g.mean(wsq))
}

/// `(1/n) Σ_i ||x̂_i - x_i||²`.
pub fn reconstruction_loss(g: &mut Graph, x_hat: Var, x: Var) -> Result<Var> {
    let (a, b) = (g.value(x_hat).shape().to_vec(), g.value(x).shape().to_vec());
    if a != b {
        return Err(Error::contract(format!(
            "reconstruction_loss: shape {a:?} vs {b:?}"
        )));
    }
    let n = g.value(x).rows().max(1);
    let r = g.sub(x_hat, x)?;
    let sq = g.square(r);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / n as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub eps: f64,
    pub iters: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            eps: 0.1,
            iters: 50,
        }
    }
}

/// Entropic optimal transport between the uniform empirical measures on the
/// rows of `a` and `b` under Euclidean ground cost, unrolled on the tape.
///
/// Both dual potentials start at zero and are updated together with
/// averaging, `f ← (f + T(g))/2`, `g ← (g + T(f))/2`, so swapping the
/// arguments replays the same arithmetic. Returns the dual value
/// `mean(f) + mean(g)`.
pub fn entropic_ot(g: &mut Graph, a: Var, b: Var, cfg: SinkhornConfig) -> Result<Var> {
    let (n, m) = (g.value(a).rows(), g.value(b).rows());
    if n == 0 || m == 0 {
        return Err(Error::contract("entropic_ot needs two nonempty point sets"));
    }
    if !(cfg.eps > 0.0) {
        return Err(Error::contract(format!(
            "Sinkhorn eps must be positive, got {}",
            cfg.eps
        )));
    }
    let cost = g.pairwise_dist(a, b)?;
    if !g.value(cost).all_finite() {
        return Err(Error::Numeric("non-finite transport cost".into()));
    }
    let (log_a, log_b) = (-(n as f64).ln(), -(m as f64).ln());
    let inv_eps = 1.0 / cfg.eps;
    let neg_c = g.scale(cost, -inv_eps);

    let mut pot_f = g.constant(Tensor::zeros(&[n, 1]));
    let mut pot_g = g.constant(Tensor::zeros(&[1, m]));
    for _ in 0..cfg.iters.max(1) {
        let s = g.scale(pot_g, inv_eps);
        let s = g.add_scalar(s, log_b);
        let l = g.logsumexp_rows_shifted(neg_c, s)?;
        let f_new = g.scale(l, -cfg.eps);

        let s = g.scale(pot_f, inv_eps);
        let s = g.add_scalar(s, log_a);
        let l = g.logsumexp_cols_shifted(neg_c, s)?;
        let g_new = g.scale(l, -cfg.eps);

        let f_sum = g.add(pot_f, f_new)?;
        pot_f = g.scale(f_sum, 0.5);
        let g_sum = g.add(pot_g, g_new)?;
        pot_g = g.scale(g_sum, 0.5);
    }
    let mf = g.mean(pot_f);
    let mg = g.mean(pot_g);
    g.add(mf, mg)
}

/// [`entropic_ot`] of a point set with itself. The cost is symmetric, so
/// the two potentials of the symmetric update coincide and one half-step
/// per iteration suffices.
pub fn entropic_ot_self(g: &mut Graph, a: Var, cfg: SinkhornConfig) -> Result<Var> {
    let n = g.value(a).rows();
    if n == 0 {
        return Err(Error::contract("entropic_ot needs a nonempty point set"));
    }
    if !(cfg.eps > 0.0) {
        return Err(Error::contract(format!(
            "Sinkhorn eps must be positive, got {}",
            cfg.eps
        )));
    }
    let cost = g.pairwise_dist(a, a)?;
    if !g.value(cost).all_finite() {
        return Err(Error::Numeric("non-finite transport cost".into()));
    }
    let log_a = -(n as f64).ln();
    let inv_eps = 1.0 / cfg.eps;
    let neg_c = g.scale(cost, -inv_eps);
    let mut pot = g.constant(Tensor::zeros(&[n, 1]));
    for _ in 0..cfg.iters.max(1) {
        let s = g.scale(pot, inv_eps);
        let s = g.add_scalar(s, log_a);
        let l = g.logsumexp_cols_shifted(neg_c, s)?;
        let l = g.transpose(l);
        let new = g.scale(l, -cfg.eps);
        let sum = g.add(pot, new)?;
        pot = g.scale(sum, 0.5);
    }
    let m = g.mean(pot);
    Ok(g.scale(m, 2.0))
}

/// Debiased Sinkhorn divergence
/// `OT(a, b) - OT(a, a)/2 - OT(b, b)/2` between treated and control
/// representations. Symmetric, zero on identical inputs.
///
/// Returns `None` when either group is empty; callers treat that as a zero
/// term.
pub fn ipm_wasserstein(
    g: &mut Graph,
    treated: Var,
    control: Var,
    cfg: SinkhornConfig,
) -> Result<Option<Var>> {
    let (n, m) = (g.value(treated).rows(), g.value(control).rows());
    if n == 0 || m == 0 {
        warn!("balancing term skipped: batch has {n} treated and {m} control rows");
        return Ok(None);
    }
    let ab = entropic_ot(g, treated, control, cfg)?;
    let aa = entropic_ot_self(g, treated, cfg)?;
    let bb = entropic_ot_self(g, control, cfg)?;
    let self_terms = g.add(aa, bb)?;
    let half = g.scale(self_terms, 0.5);
    Ok(Some(g.sub(ab, half)?))
}

/// Diagonal-Gaussian conditional `q(z_u | z)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalCond {
    pub mean_net: MlpParams,
    pub logvar_net: MlpParams,
}

impl VariationalCond {
    pub fn init<R: Rng + ?Sized>(
        z_dim: usize,
        zu_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(VariationalCond {
            mean_net: MlpParams::init(&[z_dim, hidden, zu_dim], Activation::Relu, rng)?,
            logvar_net: MlpParams::init(&[z_dim, hidden, zu_dim], Activation::Tanh, rng)?,
        })
    }

    pub fn bind(&self, g: &mut Graph) -> BoundVariational {
        BoundVariational {
            mean: self.mean_net.bind(g),
            logvar: self.logvar_net.bind(g),
        }
    }

    pub fn bind_constant(&self, g: &mut Graph) -> BoundVariational {
        BoundVariational {
            mean: self.mean_net.bind_constant(g),
            logvar: self.logvar_net.bind_constant(g),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundVariational {
    pub mean: BoundMlp,
    pub logvar: BoundMlp,
}

struct Conditional {
    mean: Var,
    logvar: Var,
}

fn conditional(g: &mut Graph, z: Var, z_u: Var, q: &BoundVariational) -> Result<Conditional> {
    let (m, mu) = (g.value(z).rows(), g.value(z_u).rows());
    if m != mu {
        return Err(Error::contract(format!(
            "CLUB inputs have {m} and {mu} rows"
        )));
    }
    if m == 0 {
        return Err(Error::contract("CLUB needs at least one row"));
    }
    let mean = q.mean.forward(g, z)?;
    let logvar = q.logvar.forward(g, z)?;
    let (a, b) = (
        g.value(mean).shape().to_vec(),
        g.value(z_u).shape().to_vec(),
    );
    if a != b {
        return Err(Error::shape(
            "club",
            format!("q output {a:?}"),
            format!("z_u {b:?}"),
        ));
    }
    Ok(Conditional { mean, logvar })
}

/// `log q(z_u_i | z_i)` per row, `[m, 1]`.
fn diagonal_log_density(g: &mut Graph, c: &Conditional, z_u: Var) -> Result<Var> {
    let q = g.value(z_u).cols() as f64;
    let r = g.sub(z_u, c.mean)?;
    let r2 = g.square(r);
    let neg_lv = g.scale(c.logvar, -1.0);
    let prec = g.exp(neg_lv);
    let quad = g.mul(r2, prec)?;
    let quad = g.sum_rows(quad);
    let lv = g.sum_rows(c.logvar);
    let s = g.add(quad, lv)?;
    let s = g.scale(s, -0.5);
    Ok(g.add_scalar(s, -0.5 * q * (2.0 * PI).ln()))
}

/// `[m, m]` matrix with entry `(i, j) = log q(z_u_j | z_i)`.
fn log_density_matrix(g: &mut Graph, c: &Conditional, z_u: Var) -> Result<Var> {
    let q = g.value(z_u).cols() as f64;
    let neg_lv = g.scale(c.logvar, -1.0);
    let prec = g.exp(neg_lv);
    let zu2 = g.square(z_u);
    let t1 = g.matmul_t(prec, zu2)?;
    let pm = g.mul(prec, c.mean)?;
    let t2 = g.matmul_t(pm, z_u)?;
    let pm2 = g.mul(pm, c.mean)?;
    let t3 = g.sum_rows(pm2);
    let lv = g.sum_rows(c.logvar);
    let row = g.add(t3, lv)?;
    let row = g.scale(row, -0.5);
    let row = g.add_scalar(row, -0.5 * q * (2.0 * PI).ln());
    let t1 = g.scale(t1, -0.5);
    let l = g.add(t1, t2)?;
    g.add_col_broadcast(l, row)
}

fn identity(m: usize) -> Tensor {
    let mut t = Tensor::zeros(&[m, m]);
    for i in 0..m {
        t.set(i, i, 1.0);
    }
    t
}

/// Sample CLUB estimate
/// `(1/m) Σ_i [log q(z_u_i | z_i) - (1/m) Σ_j log q(z_u_j | z_i)]`.
pub fn club_mi(g: &mut Graph, z: Var, z_u: Var, q: &BoundVariational) -> Result<Var> {
    let c = conditional(g, z, z_u, q)?;
    let full = log_density_matrix(g, &c, z_u)?;
    let m = g.value(full).rows();
    let eye = g.constant(identity(m));
    let diag = g.mul(full, eye)?;
    let pos = g.sum(diag);
    let pos = g.scale(pos, 1.0 / m as f64);
    let neg = g.mean(full);
    g.sub(pos, neg)
}

/// Negative mean log-likelihood of `z_u` under `q(· | z)`.
pub fn q_nll(g: &mut Graph, z: Var, z_u: Var, q: &BoundVariational) -> Result<Var> {
    let c = conditional(g, z, z_u, q)?;
    let diag = diagonal_log_density(g, &c, z_u)?;
    let m = g.mean(diag);
    Ok(g.scale(m, -1.0))
}

/// Evaluates the `[m, m]` log-density matrix without a tape.
pub fn log_density_table(z: &Tensor, z_u: &Tensor, q: &VariationalCond) -> Result<Tensor> {
    let mut g = Graph::new();
    let (zv, zuv) = (g.constant(z.clone()), g.constant(z_u.clone()));
    let bq = q.bind_constant(&mut g);
    let c = conditional(&mut g, zv, zuv, &bq)?;
    let l = log_density_matrix(&mut g, &c, zuv)?;
    Ok(g.value(l).clone())
}

/// CLUB from a log-density table, double-sum form
/// `(1/m²) Σ_i Σ_j [L_ii - L_ij]`.
pub fn club_double_sum(log_q: &Tensor) -> f64 {
    let m = log_q.rows();
    let mut acc = 0.0;
    for i in 0..m {
        for j in 0..m {
            acc += log_q.get(i, i) - log_q.get(i, j);
        }
    }
    acc / (m * m) as f64
}

/// CLUB from a log-density table, collapsed form
/// `(1/m) Σ_i [L_ii - (1/m) Σ_j L_ij]`.
pub fn club_collapsed(log_q: &Tensor) -> f64 {
    let m = log_q.rows();
    let mut acc = 0.0;
    for i in 0..m {
        let row_mean = log_q.row(i).iter().sum::<f64>() / m as f64;
        acc += log_q.get(i, i) - row_mean;
    }
    acc / m as f64
}

/// `||θ_g0 - θ_g0⁰||² + ||θ_g1 - θ_g1⁰||²` over all weights and biases.
pub fn shift_loss(
    g: &mut Graph,
    g0: &BoundMlp,
    g0_init: &MlpParams,
    g1: &BoundMlp,
    g1_init: &MlpParams,
) -> Result<Var> {
    let mut terms = Vec::new();
    for (bound, init) in [(g0, g0_init), (g1, g1_init)] {
        let vars: Vec<Var> = bound.vars().collect();
        let inits: Vec<&Tensor> = init.tensors().collect();
        if vars.len() != inits.len() {
            return Err(Error::contract(format!(
                "shift_loss: {} parameter tensors vs {} in the snapshot",
                vars.len(),
                inits.len()
            )));
        }
        for (v, t0) in vars.into_iter().zip(inits) {
            if g.value(v).shape() != t0.shape() {
                return Err(Error::contract(format!(
                    "shift_loss: shape {:?} vs snapshot {:?}",
                    g.value(v).shape(),
                    t0.shape()
                )));
            }
            let c = g.constant(t0.clone());
            let d = g.sub(v, c)?;
            let d2 = g.square(d);
            terms.push(g.sum(d2));
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(total)
}

/// Plain-value squared parameter distance between two same-shaped networks.
pub fn param_distance_sq(a: &MlpParams, b: &MlpParams) -> Result<f64> {
    if a.widths() != b.widths() {
        return Err(Error::contract(format!(
            "networks differ in shape: {:?} vs {:?}",
            a.widths(),
            b.widths()
        )));
    }
    Ok(a.tensors()
        .zip(b.tensors())
        .flat_map(|(x, y)| {
            x.values()
                .iter()
                .zip(y.values())
                .map(|(p, q)| (p - q) * (p - q))
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::Linear;

    fn eval(build: impl FnOnce(&mut Graph) -> Var) -> f64 {
        let mut g = Graph::new();
        let v = build(&mut g);
        g.value(v).item().unwrap()
    }

    fn col(g: &mut Graph, v: &[f64]) -> Var {
        g.constant(Tensor::column(v.to_vec()))
    }

    #[test]
    fn weights_examples() {
        let w = balancing_weights(&[1, 0]).unwrap();
        assert_eq!((w.u, w.w.clone()), (0.5, vec![1.0, 1.0]));

        let w = balancing_weights(&[1, 1, 1, 0]).unwrap();
        assert_eq!(w.u, 0.75);
        for (a, b) in w.w.iter().zip([2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 2.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((w.w.iter().sum::<f64>() / 4.0 - 1.0).abs() < 1e-12);

        let w = balancing_weights(&[1, 1]).unwrap();
        assert_eq!(w.u, 0.999);
        assert!((w.w[0] - 1.0 / 1.998).abs() < 1e-15);

        assert!(balancing_weights(&[]).is_err());
    }

    proptest! {
        #[test]
        fn weights_average_to_one(t in proptest::collection::vec(0u8..2, 2..300)) {
            prop_assume!(t.contains(&0) && t.contains(&1));
            let w = balancing_weights(&t).unwrap();
            let mean = w.w.iter().sum::<f64>() / t.len() as f64;
            prop_assert!((mean - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn factual_examples() {
        let v = eval(|g| {
            let (p, y, w) = (
                col(g, &[1.0, 3.0]),
                col(g, &[1.0, 2.0]),
                col(g, &[1.0, 1.0]),
            );
            factual_loss(g, p, y, w).unwrap()
        });
        assert_eq!(v, 0.5);
        let v = eval(|g| {
            let (p, y, w) = (col(g, &[0.0]), col(g, &[2.0]), col(g, &[2.0]));
            factual_loss(g, p, y, w).unwrap()
        });
        assert_eq!(v, 8.0);
        let v = eval(|g| {
            let (p, w) = (col(g, &[0.3, -1.0]), col(g, &[5.0, 0.1]));
            factual_loss(g, p, p, w).unwrap()
        });
        assert_eq!(v, 0.0);
        let mut g = Graph::new();
        let (p, y, w) = (
            col(&mut g, &[0.0, 1.0]),
            col(&mut g, &[2.0]),
            col(&mut g, &[2.0, 1.0]),
        );
        assert!(factual_loss(&mut g, p, y, w).is_err());
    }

    #[test]
    fn reconstruction_examples() {
        let v = eval(|g| {
            let x = g.constant(Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap());
            let h = g.constant(Tensor::zeros(&[1, 2]));
            reconstruction_loss(g, h, x).unwrap()
        });
        assert_eq!(v, 2.0);
        let v = eval(|g| {
            let x = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
            let h = g.constant(Tensor::zeros(&[2, 2]));
            reconstruction_loss(g, h, x).unwrap()
        });
        assert_eq!(v, 1.0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 2]));
        let h = g.constant(Tensor::zeros(&[2, 3]));
        assert!(reconstruction_loss(&mut g, h, x).is_err());
    }

    fn ipm(a: &Tensor, b: &Tensor) -> f64 {
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let v = ipm_wasserstein(&mut g, av, bv, SinkhornConfig::default())
            .unwrap()
            .unwrap();
        g.value(v).item().unwrap()
    }

    #[test]
    fn ipm_singletons() {
        let a = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let b = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let v = ipm(&a, &b);
        assert!((v - 1.0).abs() <= 0.05, "{v}");
        assert!(ipm(&a, &a).abs() <= 1e-6);
    }

    #[test]
    fn ipm_empty_group_is_skipped() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[0, 2]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        assert!(ipm_wasserstein(&mut g, a, b, SinkhornConfig::default())
            .unwrap()
            .is_none());
    }

    #[test]
    fn ipm_rejects_non_finite() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(1, 1, vec![f64::INFINITY]).unwrap());
        let b = g.constant(Tensor::matrix(1, 1, vec![0.0]).unwrap());
        assert!(matches!(
            ipm_wasserstein(&mut g, a, b, SinkhornConfig::default()),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn self_transport_matches_general_routine() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_points(&mut rng, 7, 3);
        let mut g = Graph::new();
        let av = g.constant(a);
        let general = entropic_ot(&mut g, av, av, SinkhornConfig::default()).unwrap();
        let special = entropic_ot_self(&mut g, av, SinkhornConfig::default()).unwrap();
        let (x, y) = (
            g.value(general).item().unwrap(),
            g.value(special).item().unwrap(),
        );
        assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{x} vs {y}");
    }

    #[test]
    fn ipm_monotone_in_separation() {
        let a = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let mut last = -1.0;
        for k in 0..=20 {
            let b = Tensor::matrix(1, 1, vec![k as f64 * 0.25]).unwrap();
            let v = ipm(&a, &b);
            assert!(v >= last, "{v} < {last}");
            last = v;
        }
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        Tensor::matrix(
            n,
            d,
            (0..n * d).map(|_| rng.random_range(-1.5..1.5)).collect(),
        )
        .unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn ipm_axioms(seed in any::<u64>(), n in 1usize..9, m in 1usize..9, d in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_points(&mut rng, n, d);
            let b = random_points(&mut rng, m, d);
            let ab = ipm(&a, &b);
            let ba = ipm(&b, &a);
            prop_assert!(ab >= 0.0, "negative divergence {}", ab);
            prop_assert!((ab - ba).abs() <= 1e-8);
            prop_assert!(ipm(&a, &a).abs() <= 1e-6);
        }
    }

    fn gaussian_q(zu_dim: usize) -> VariationalCond {
        // Mean equals the input, log-variance zero.
        let eye = Tensor::matrix(
            zu_dim,
            zu_dim,
            (0..zu_dim * zu_dim)
                .map(|k| if k / zu_dim == k % zu_dim { 1.0 } else { 0.0 })
                .collect(),
        )
        .unwrap();
        let mean = MlpParams::new(
            vec![Linear {
                weight: eye,
                bias: Tensor::zeros(&[zu_dim]),
            }],
            Activation::Identity,
        )
        .unwrap();
        let logvar =
            MlpParams::new(vec![Linear::zeros(zu_dim, zu_dim)], Activation::Identity).unwrap();
        VariationalCond {
            mean_net: mean,
            logvar_net: logvar,
        }
    }

    #[test]
    fn club_single_sample_cancels() {
        let q = VariationalCond::init(3, 2, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_rows(&[vec![0.1, 0.2, 0.3]]).unwrap());
        let zu = g.constant(Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap());
        let bq = q.bind_constant(&mut g);
        let v = club_mi(&mut g, z, zu, &bq).unwrap();
        assert_eq!(g.value(v).item().unwrap(), 0.0);
    }

    #[test]
    fn club_from_table_example() {
        let l = Tensor::from_rows(&[vec![-1.0, -2.0], vec![-3.0, -1.5]]).unwrap();
        assert!((club_double_sum(&l) - 0.625).abs() < 1e-15);
        assert!((club_collapsed(&l) - 0.625).abs() < 1e-15);
    }

    #[test]
    fn club_row_mismatch() {
        let q = gaussian_q(2);
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[3, 2]));
        let zu = g.constant(Tensor::zeros(&[2, 2]));
        let bq = q.bind_constant(&mut g);
        assert!(club_mi(&mut g, z, zu, &bq).is_err());
        assert!(q_nll(&mut g, z, zu, &bq).is_err());
    }

    #[test]
    fn q_nll_at_mean() {
        let q = gaussian_q(3);
        let z = Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let v = eval(|g| {
            let (zv, zu) = (g.constant(z.clone()), g.constant(z.clone()));
            let bq = q.bind_constant(g);
            q_nll(g, zv, zu, &bq).unwrap()
        });
        assert!((v - 3.0 * 0.5 * (2.0 * PI).ln()).abs() < 1e-12);
        assert!((0.5 * (2.0 * PI).ln() - 0.9189385332).abs() < 1e-9);
    }

    #[test]
    fn q_nll_grows_with_distance() {
        let q = gaussian_q(1);
        let mut last = f64::NEG_INFINITY;
        for k in 0..10 {
            let v = eval(|g| {
                let z = g.constant(Tensor::column(vec![0.0]));
                let zu = g.constant(Tensor::column(vec![k as f64 * 0.3]));
                let bq = q.bind_constant(g);
                q_nll(g, z, zu, &bq).unwrap()
            });
            assert!(v > last);
            last = v;
        }
    }

    fn scalar_head(w: f64) -> MlpParams {
        MlpParams::new(
            vec![
                Linear {
                    weight: Tensor::matrix(1, 1, vec![w]).unwrap(),
                    bias: Tensor::zeros(&[1]),
                },
                Linear {
                    weight: Tensor::matrix(1, 1, vec![0.0]).unwrap(),
                    bias: Tensor::zeros(&[1]),
                },
            ],
            Activation::Relu,
        )
        .unwrap()
    }

    fn shift(a0: &MlpParams, i0: &MlpParams, a1: &MlpParams, i1: &MlpParams) -> Result<f64> {
        let mut g = Graph::new();
        let (b0, b1) = (a0.bind(&mut g), a1.bind(&mut g));
        let v = shift_loss(&mut g, &b0, i0, &b1, i1)?;
        g.value(v).item()
    }

    #[test]
    fn shift_examples() {
        let h = scalar_head(1.0);
        assert_eq!(shift(&h, &h, &h, &h).unwrap(), 0.0);
        let moved = scalar_head(3.0);
        assert_eq!(shift(&moved, &h, &moved, &h).unwrap(), 8.0);

        let mut moved_deep = h.clone();
        moved_deep.layers[1].bias.values_mut()[0] += 2.0;
        assert_eq!(shift(&moved_deep, &h, &moved, &h).unwrap(), 8.0);

        let other = MlpParams::init(
            &[2, 1, 1],
            Activation::Relu,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!(shift(&other, &h, &h, &h).is_err());
    }
}
