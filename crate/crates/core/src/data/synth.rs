//! Semi-synthetic potential outcomes with a hidden confounder.
//!
//! Weights are drawn once per call:
//!
//! ```text
//! w1 ~ N(0, 0.1)^d      w2 ~ N(0.02, 0.1)^c
//! w3 ~ N(0.1, 1)^d      w4 ~ N(0.1, 1)^c
//! w5 ~ U(0, 0.2)^d      w6 ~ U(0, 0.2)^c
//! ```
//!
//! and per unit `u ~ U(0, 0.2)^c`, `t ~ Bern(sigmoid(w1·x + w2·u))`,
//! `y0 ~ N(w3·x + w4·u, 0.1)`, `y1 ~ N(w5·x + w6·u + 4, 0.1)`.
//! The second argument of `N` is a variance.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::{Dataset, Potentials, OBS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Treated potential outcomes are shifted by this constant.
pub const EFFECT_SHIFT: f64 = 4.0;
const NOISE_VARIANCE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisParams {
    pub seed: u64,
    pub c: usize,
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    pub w3: Vec<f64>,
    pub w4: Vec<f64>,
    pub w5: Vec<f64>,
    pub w6: Vec<f64>,
}

/// The confounder draws. Kept apart from [`Dataset`] so no model can see them.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenConfounders {
    pub u: Tensor,
}

#[derive(Clone, Debug)]
pub struct Synthesized {
    pub dataset: Dataset,
    pub params: SynthesisParams,
    pub hidden: HiddenConfounders,
}

fn normal_vec(rng: &mut ChaCha8Rng, mean: f64, variance: f64, n: usize) -> Vec<f64> {
    let dist = Normal::new(mean, variance.sqrt()).expect("finite positive std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

fn uniform_vec(rng: &mut ChaCha8Rng, lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let dist = Uniform::new(lo, hi).expect("lo < hi");
    (0..n).map(|_| dist.sample(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn synthesize(covariates: &Tensor, c: usize, seed: u64) -> Result<Synthesized> {
    if c == 0 {
        return Err(Error::contract(
            "hidden confounder dimension must be at least 1",
        ));
    }
    if !covariates.all_finite() {
        return Err(Error::contract("covariates must be finite"));
    }
    let (n, d) = (covariates.rows(), covariates.cols());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let params = SynthesisParams {
        seed,
        c,
        w1: normal_vec(&mut rng, 0.0, 0.1, d),
        w2: normal_vec(&mut rng, 0.02, 0.1, c),
        w3: normal_vec(&mut rng, 0.1, 1.0, d),
        w4: normal_vec(&mut rng, 0.1, 1.0, c),
        w5: uniform_vec(&mut rng, 0.0, 0.2, d),
        w6: uniform_vec(&mut rng, 0.0, 0.2, c),
    };

    let noise = Normal::new(0.0, NOISE_VARIANCE.sqrt()).expect("valid");
    let u_dist = Uniform::new(0.0, 0.2).expect("valid");
    let mut u = Vec::with_capacity(n * c);
    let (mut t, mut y, mut y0, mut y1) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for i in 0..n {
        let x = covariates.row(i);
        let ui: Vec<f64> = (0..c).map(|_| u_dist.sample(&mut rng)).collect();
        let p = sigmoid(dot(&params.w1, x) + dot(&params.w2, &ui));
        let ti = u8::from(rng.sample(Bernoulli::new(p).expect("p in [0, 1]")));
        let mu0 = dot(&params.w3, x) + dot(&params.w4, &ui);
        let mu1 = dot(&params.w5, x) + dot(&params.w6, &ui) + EFFECT_SHIFT;
        let a = mu0 + noise.sample(&mut rng);
        let b = mu1 + noise.sample(&mut rng);
        y.push(if ti == 1 { b } else { a });
        t.push(ti);
        y0.push(a);
        y1.push(b);
        u.extend(ui);
    }

    let dataset = Dataset::new(
        covariates.clone(),
        t,
        y,
        vec![OBS; n],
        Some(Potentials { y0, y1 }),
    )?;
    Ok(Synthesized {
        dataset,
        params,
        hidden: HiddenConfounders {
            u: Tensor::matrix(n, c, u)?,
        },
    })
}
