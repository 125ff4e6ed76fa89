//! Helpers shared by the integration tests: random tensors, central
//! finite differences, and small training configurations.

#![allow(dead_code)]

pub mod terms;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
pub use tspf_core::tspf::TrainConfig;
pub use tspf_core::{Activation, Graph, MlpParams, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let v = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::matrix(rows, cols, v).unwrap()
}

/// Deterministic non-trivial weights used to reduce a tensor-valued op to
/// a scalar.
pub fn probe_weights(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let v = (0..n).map(|i| (1.3 * i as f64 + 0.5).sin()).collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// `sum(out ⊙ C)` with fixed `C`.
pub fn reduce(g: &mut Graph, out: Var) -> Var {
    let c = g.constant(probe_weights(g.value(out).shape()));
    let p = g.mul(out, c).unwrap();
    g.sum(p)
}

/// Worst per-entry relative error `|a - n| / (|n| + 1e-8)`.
#[derive(Clone, Copy, Debug)]
pub struct FdReport {
    pub max_rel: f64,
    pub checked: usize,
}

impl FdReport {
    fn merge(self, rel: f64) -> Self {
        FdReport {
            max_rel: self.max_rel.max(rel),
            checked: self.checked + 1,
        }
    }

    pub fn ok(&self) -> bool {
        self.checked > 0 && self.max_rel <= FD_REL_TOL
    }
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / (n.abs() + 1e-8)
}

/// Compares reverse-mode gradients of `build` with respect to every leaf in
/// `inputs` against central differences.
pub fn check_leaves(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) -> FdReport {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let l = build(&mut g, &vars);
        g.value(l).item().unwrap()
    };
    let mut report = FdReport {
        max_rel: 0.0,
        checked: 0,
    };
    for k in 0..inputs.len() {
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].values_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].values_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            report = report.merge(rel(analytic[k].values()[i], numeric));
        }
    }
    report
}

/// Like [`check_leaves`] but for parameters held in networks of a model.
/// `analytic` lists gradients in the order of `nets(model)` and
/// [`MlpParams::tensors`].
pub fn check_model<M: Clone>(
    model: &M,
    nets: fn(&mut M) -> Vec<&mut MlpParams>,
    value: impl Fn(&M) -> f64,
    analytic: &[Tensor],
) -> FdReport {
    let mut probe = model.clone();
    let sizes: Vec<usize> = nets(&mut probe)
        .into_iter()
        .flat_map(|n| n.tensors_mut().map(|t| t.len()).collect::<Vec<_>>())
        .collect();
    assert_eq!(
        sizes.len(),
        analytic.len(),
        "gradient list does not match parameter tensors"
    );
    let perturbed = |k: usize, i: usize, delta: f64| {
        let mut m = model.clone();
        let mut idx = 0;
        for net in nets(&mut m) {
            for t in net.tensors_mut() {
                if idx == k {
                    t.values_mut()[i] += delta;
                }
                idx += 1;
            }
        }
        m
    };
    let mut report = FdReport {
        max_rel: 0.0,
        checked: 0,
    };
    for (k, &n) in sizes.iter().enumerate() {
        for i in 0..n {
            let numeric = (value(&perturbed(k, i, FD_STEP)) - value(&perturbed(k, i, -FD_STEP)))
                / (2.0 * FD_STEP);
            report = report.merge(rel(analytic[k].values()[i], numeric));
        }
    }
    report
}

/// Adds uniform noise in `[-s, s]` to every parameter so no unit sits
/// exactly on an activation kink.
pub fn jitter(net: &mut MlpParams, s: f64, rng: &mut ChaCha8Rng) {
    for t in net.tensors_mut() {
        for v in t.values_mut() {
            *v += rng.random_range(-s..s);
        }
    }
}

/// Tiny networks for gradient checks (every hidden width ≤ 8).
pub fn tiny_config(activation: Activation) -> TrainConfig {
    TrainConfig {
        r: 3,
        r_u: 2,
        hidden: 5,
        g_hidden: 7,
        q_hidden: 4,
        l_p: 2,
        activation,
        ..TrainConfig::default()
    }
}
