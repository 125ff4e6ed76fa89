//! Unit-level records, semi-synthetic outcome generation, trial carve-out,
//! splitting and batching.

mod io;
mod load;
mod split;
mod synth;

pub use io::{read_dataset_csv, write_bundle, write_dataset_csv, BundleSidecar};
pub use load::{
    load_covariates, synthetic_covariates, ColumnScaling, CovariateSchema, CovariateTable,
};
pub use split::{batches, make_rct, rerandomize_validation, split, split_indices, split_sizes};
pub use synth::{synthesize, HiddenConfounders, SynthesisParams, Synthesized};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};
use crate::tensor::Tensor;

/// Study membership.
pub const OBS: u8 = 0;
pub const RCT: u8 = 1;

/// Oracle potential outcomes, known only because the outcomes are synthesized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Potentials {
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
}

/// One unit, borrowed from a [`Dataset`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample<'a> {
    pub x: &'a [f64],
    pub t: u8,
    pub y: f64,
    pub g: u8,
    pub y0: Option<f64>,
    pub y1: Option<f64>,
}

/// Column-oriented collection of units.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Covariates, `[n, d]`.
    pub x: Tensor,
    pub t: Vec<u8>,
    pub y: Vec<f64>,
    pub g: Vec<u8>,
    pub potentials: Option<Potentials>,
}

impl Dataset {
    pub fn new(
        x: Tensor,
        t: Vec<u8>,
        y: Vec<f64>,
        g: Vec<u8>,
        potentials: Option<Potentials>,
    ) -> Result<Self> {
        let n = x.rows();
        let lens = [t.len(), y.len(), g.len()];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::shape(
                "Dataset::new",
                format!("{n} covariate rows"),
                format!("column lengths {lens:?}"),
            ));
        }
        if let Some(p) = &potentials {
            if p.y0.len() != n || p.y1.len() != n {
                return Err(Error::shape(
                    "Dataset::new",
                    n,
                    format!("potentials of length {}/{}", p.y0.len(), p.y1.len()),
                ));
            }
        }
        if t.iter().chain(&g).any(|&v| v > 1) {
            return Err(Error::contract("treatment and group flags must be 0 or 1"));
        }
        Ok(Dataset {
            x,
            t,
            y,
            g,
            potentials,
        })
    }

    pub fn empty(d: usize) -> Self {
        Dataset {
            x: Tensor::zeros(&[0, d]),
            t: vec![],
            y: vec![],
            g: vec![],
            potentials: Some(Potentials {
                y0: vec![],
                y1: vec![],
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn sample(&self, i: usize) -> Sample<'_> {
        Sample {
            x: self.x.row(i),
            t: self.t[i],
            y: self.y[i],
            g: self.g[i],
            y0: self.potentials.as_ref().map(|p| p.y0[i]),
            y1: self.potentials.as_ref().map(|p| p.y1[i]),
        }
    }

    pub fn samples(&self) -> impl Iterator<Item = Sample<'_>> {
        (0..self.len()).map(|i| self.sample(i))
    }

    pub fn potentials(&self) -> Result<&Potentials> {
        self.potentials
            .as_ref()
            .ok_or_else(|| Error::contract("dataset carries no oracle potential outcomes"))
    }

    pub fn t_f64(&self) -> Vec<f64> {
        self.t.iter().map(|&t| f64::from(t)).collect()
    }

    pub fn treated_fraction(&self) -> f64 {
        self.t.iter().map(|&t| f64::from(t)).sum::<f64>() / self.len().max(1) as f64
    }

    /// Oracle unit-level effects `y1 - y0`.
    pub fn true_effects(&self) -> Result<Vec<f64>> {
        let p = self.potentials()?;
        Ok(p.y1.iter().zip(&p.y0).map(|(a, b)| a - b).collect())
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let pick_u8 = |v: &[u8]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Dataset {
            x: self.x.select_rows(idx),
            t: pick_u8(&self.t),
            y: pick(&self.y),
            g: pick_u8(&self.g),
            potentials: self.potentials.as_ref().map(|p| Potentials {
                y0: pick(&p.y0),
                y1: pick(&p.y1),
            }),
        }
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.dim() != other.dim() {
            return Err(Error::shape("Dataset::concat", self.dim(), other.dim()));
        }
        let mut xv = self.x.values().to_vec();
        xv.extend_from_slice(other.x.values());
        let cat = |a: &[f64], b: &[f64]| [a, b].concat();
        let potentials = match (&self.potentials, &other.potentials) {
            (Some(a), Some(b)) => Some(Potentials {
                y0: cat(&a.y0, &b.y0),
                y1: cat(&a.y1, &b.y1),
            }),
            _ => None,
        };
        Dataset::new(
            Tensor::matrix(self.len() + other.len(), self.dim(), xv)?,
            [self.t.as_slice(), &other.t].concat(),
            cat(&self.y, &other.y),
            [self.g.as_slice(), &other.g].concat(),
            potentials,
        )
    }

    pub fn indices_with_t(&self, t: u8) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.t[i] == t).collect()
    }

    pub(crate) fn require_group(&self, g: u8, what: &str) -> Result<()> {
        if let Some(i) = self.g.iter().position(|&v| v != g) {
            return Err(Error::contract(format!(
                "{what} expects only group {g} rows, row {i} has group {}",
                self.g[i]
            )));
        }
        Ok(())
    }
}

/// Every split a run needs. Index sets are disjoint by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub obs_train: Dataset,
    pub rct_train: Dataset,
    /// Treatments rerandomized, outcomes replaced accordingly.
    pub validation: Dataset,
    pub test: Dataset,
}

impl DatasetBundle {
    /// Covariates and potentials of the whole training slice.
    pub fn train_pool(&self) -> Result<Dataset> {
        self.obs_train.concat(&self.rct_train)
    }
}

/// A bundle with the generating parameters kept for exact reproduction.
#[derive(Clone, Debug)]
pub struct Generated {
    pub bundle: DatasetBundle,
    pub synthesis: SynthesisParams,
    pub hidden: HiddenConfounders,
    pub seed: u64,
}

/// Synthesize outcomes over `covariates`, split 63/27/10, carve the trial out
/// of the training slice and rerandomize validation. Each step draws from its
/// own stream of `seed`.
pub fn build_bundle(
    covariates: &Tensor,
    c: usize,
    rct_fraction: f64,
    seed: u64,
) -> Result<Generated> {
    let synth = synthesize(covariates, c, derive_seed(seed, stream::SYNTH))?;
    let (train, validation, test) = split(&synth.dataset, derive_seed(seed, stream::SPLIT))?;
    let (obs_train, rct_train) = make_rct(&train, rct_fraction, derive_seed(seed, stream::RCT))?;
    let validation = rerandomize_validation(&validation, derive_seed(seed, stream::VALIDATION))?;
    Ok(Generated {
        bundle: DatasetBundle {
            obs_train,
            rct_train,
            validation,
            test,
        },
        synthesis: synth.params,
        hidden: synth.hidden,
        seed,
    })
}
