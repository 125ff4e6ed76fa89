//! Finite-difference checks of every loss term and of both composed
//! objectives. Each returns named reports so callers can assert or print.

use super::*;
use tspf_core::data::{build_bundle, synthetic_covariates, Dataset};
use tspf_core::losses::{
    balancing_weights, club_mi, entropic_ot, factual_loss, factual_prediction, ipm_wasserstein,
    q_nll, reconstruction_loss, shift_loss, BoundVariational, SinkhornConfig, VariationalCond,
};
use tspf_core::tspf::{
    init_stage1, init_stage2_from_stage1, stage1_objective, stage2_objective, Lambdas, Stage1Model,
    Stage2Model,
};

pub type Named = Vec<(String, FdReport)>;

pub fn factual() -> Named {
    let mut r = rng(4);
    let y0 = random(6, 1, -1.0, 1.0, &mut r);
    let y1 = random(6, 1, -1.0, 1.0, &mut r);
    let y = random(6, 1, -1.0, 1.0, &mut r);
    let report = check_leaves(&[y0, y1, y], |g, v| {
        let t = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let w = balancing_weights(&[1, 0, 0, 1, 1, 0]).unwrap().w;
        let pred = factual_prediction(g, v[0], v[1], &t).unwrap();
        let wv = g.constant(Tensor::column(w));
        factual_loss(g, pred, v[2], wv).unwrap()
    });
    vec![("factual".into(), report)]
}

pub fn reconstruction() -> Named {
    let mut r = rng(5);
    let a = random(4, 3, -1.0, 1.0, &mut r);
    let b = random(4, 3, -1.0, 1.0, &mut r);
    vec![(
        "reconstruction".into(),
        check_leaves(&[a, b], |g, v| reconstruction_loss(g, v[0], v[1]).unwrap()),
    )]
}

pub fn balance() -> Named {
    let mut r = rng(6);
    let a = random(5, 3, -1.0, 1.0, &mut r);
    let b = random(4, 3, -0.5, 1.5, &mut r);
    let ipm = check_leaves(&[a.clone(), b.clone()], |g, v| {
        ipm_wasserstein(g, v[0], v[1], SinkhornConfig::default())
            .unwrap()
            .unwrap()
    });
    let ot = check_leaves(&[a, b], |g, v| {
        entropic_ot(g, v[0], v[1], SinkhornConfig::default()).unwrap()
    });
    vec![("ipm".into(), ipm), ("entropic ot".into(), ot)]
}

fn variational(seed: u64) -> VariationalCond {
    let mut r = rng(seed);
    let mut q = VariationalCond::init(3, 2, 4, &mut r).unwrap();
    jitter(&mut q.mean_net, 0.05, &mut r);
    jitter(&mut q.logvar_net, 0.05, &mut r);
    q
}

fn q_nets(q: &mut VariationalCond) -> Vec<&mut MlpParams> {
    vec![&mut q.mean_net, &mut q.logvar_net]
}

type Term = fn(&mut Graph, Var, Var, &BoundVariational) -> tspf_core::Result<Var>;

/// CLUB and the q likelihood, with respect to both representations and to
/// the parameters of q.
pub fn mutual_information() -> Named {
    let mut r = rng(7);
    let z = random(6, 3, -1.0, 1.0, &mut r);
    let zu = random(6, 2, -1.0, 1.0, &mut r);
    let q = variational(8);
    let mut out = Named::new();
    for (name, term) in [("club_mi", club_mi as Term), ("q_nll", q_nll as Term)] {
        let report = check_leaves(&[z.clone(), zu.clone()], |g, v| {
            let bq = variational(8).bind_constant(g);
            term(g, v[0], v[1], &bq).unwrap()
        });
        out.push((format!("{name} wrt representations"), report));

        let value = |q: &VariationalCond| {
            let mut g = Graph::new();
            let (zv, zuv) = (g.constant(z.clone()), g.constant(zu.clone()));
            let bq = q.bind(&mut g);
            let l = term(&mut g, zv, zuv, &bq).unwrap();
            g.value(l).item().unwrap()
        };
        let mut g = Graph::new();
        let (zv, zuv) = (g.constant(z.clone()), g.constant(zu.clone()));
        let bq = q.bind(&mut g);
        let l = term(&mut g, zv, zuv, &bq).unwrap();
        let grads = g.backward(l).unwrap();
        let mut analytic = bq.mean.grads(&grads).unwrap();
        analytic.extend(bq.logvar.grads(&grads).unwrap());
        out.push((
            format!("{name} wrt q"),
            check_model(&q, q_nets, value, &analytic),
        ));
    }
    out
}

pub fn shift() -> Named {
    let mut r = rng(9);
    let init0 = MlpParams::init(&[4, 6, 1], Activation::Relu, &mut r).unwrap();
    let init1 = MlpParams::init(&[4, 6, 1], Activation::Relu, &mut r).unwrap();
    let mut pair = (init0.clone(), init1.clone());
    jitter(&mut pair.0, 0.3, &mut r);
    jitter(&mut pair.1, 0.3, &mut r);
    let value = |p: &(MlpParams, MlpParams)| {
        let mut g = Graph::new();
        let (a, b) = (p.0.bind(&mut g), p.1.bind(&mut g));
        let l = shift_loss(&mut g, &a, &init0, &b, &init1).unwrap();
        g.value(l).item().unwrap()
    };
    let mut g = Graph::new();
    let (a, b) = (pair.0.bind(&mut g), pair.1.bind(&mut g));
    let l = shift_loss(&mut g, &a, &init0, &b, &init1).unwrap();
    let grads = g.backward(l).unwrap();
    let mut analytic = a.grads(&grads).unwrap();
    analytic.extend(b.grads(&grads).unwrap());
    vec![(
        "shift".into(),
        check_model(&pair, |p| vec![&mut p.0, &mut p.1], value, &analytic),
    )]
}

fn batch(n: usize, seed: u64) -> Dataset {
    let g = build_bundle(&synthetic_covariates(200, 4, seed), 3, 0.1, seed).unwrap();
    let obs = &g.bundle.obs_train;
    let mut idx: Vec<usize> = obs.indices_with_t(1).into_iter().take(n / 2).collect();
    idx.extend(obs.indices_with_t(0).into_iter().take(n - idx.len()));
    obs.select(&idx)
}

fn stage1_nets(m: &mut Stage1Model) -> Vec<&mut MlpParams> {
    vec![&mut m.phi, &mut m.psi, &mut m.h0, &mut m.h1]
}

fn stage2_nets(m: &mut Stage2Model) -> Vec<&mut MlpParams> {
    vec![&mut m.phi_u, &mut m.g0, &mut m.g1]
}

const LAMBDAS: Lambdas = Lambdas {
    rec: 0.3,
    unb: 0.5,
    mi: 0.4,
    shift: 0.7,
};

pub fn stage1_composed() -> Named {
    let data = batch(10, 11);
    let w = balancing_weights(&data.t).unwrap().w;
    let mut out = Named::new();
    for act in [Activation::Tanh, Activation::Relu] {
        let cfg = TrainConfig {
            lambdas: LAMBDAS,
            ..tiny_config(act)
        };
        let mut m = init_stage1(4, &cfg).unwrap();
        let mut r = rng(12);
        for n in stage1_nets(&mut m) {
            jitter(n, 0.02, &mut r);
        }
        let tape = stage1_objective(&m, &data, &w, &cfg).unwrap();
        assert!(tape.balance.is_some());
        let (phi, psi, h0, h1) = (
            tape.phi.clone(),
            tape.psi.clone(),
            tape.h0.clone(),
            tape.h1.clone(),
        );
        let grads = tape.graph.backward(tape.total).unwrap();
        let analytic: Vec<Tensor> = [phi, psi, h0, h1]
            .iter()
            .flat_map(|b| b.grads(&grads).unwrap())
            .collect();
        let value = |m: &Stage1Model| {
            let t = stage1_objective(m, &data, &w, &cfg).unwrap();
            t.graph.value(t.total).item().unwrap()
        };
        out.push((
            format!("stage-1 objective {act:?}"),
            check_model(&m, stage1_nets, value, &analytic),
        ));
    }
    out
}

/// Also fails (with an infinite error) if the frozen representation picks
/// up a gradient.
pub fn stage2_composed() -> Named {
    let data = batch(10, 13);
    let w = balancing_weights(&data.t).unwrap().w;
    let mut out = Named::new();
    for act in [Activation::Tanh, Activation::Relu] {
        let cfg = TrainConfig {
            lambdas: LAMBDAS,
            ..tiny_config(act)
        };
        let s1 = init_stage1(4, &cfg).unwrap();
        let mut m = init_stage2_from_stage1(&s1, &cfg).unwrap();
        let mut r = rng(14);
        for n in stage2_nets(&mut m) {
            jitter(n, 0.05, &mut r);
        }
        let tape = stage2_objective(&m, &data, &w, &cfg).unwrap();
        let (phi_u, g0, g1) = (tape.phi_u.clone(), tape.g0.clone(), tape.g1.clone());
        let grads = tape.graph.backward(tape.total).unwrap();
        let leaked = tape.phi.grads(&grads).is_some();
        let analytic: Vec<Tensor> = [phi_u, g0, g1]
            .iter()
            .flat_map(|b| b.grads(&grads).unwrap())
            .collect();
        let value = |m: &Stage2Model| {
            let t = stage2_objective(m, &data, &w, &cfg).unwrap();
            t.graph.value(t.total).item().unwrap()
        };
        let mut report = check_model(&m, stage2_nets, value, &analytic);
        if leaked {
            report.max_rel = f64::INFINITY;
        }
        out.push((format!("stage-2 objective {act:?}"), report));
    }
    out
}

/// Every term and both objectives.
pub fn all() -> Named {
    [
        factual,
        reconstruction,
        balance,
        mutual_information,
        shift,
        stage1_composed,
        stage2_composed,
    ]
    .iter()
    .flat_map(|f| f())
    .collect()
}
