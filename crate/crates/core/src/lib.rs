//! Conditional average treatment effect estimation under hidden confounding
//! by fusing a large observational sample with a small randomized trial.
//!
//! Stage one pretrains a representation and two outcome heads on
//! observational data. Stage two freezes that representation, adds a small
//! adapter network, and finetunes wider heads on trial data. The wider heads
//! are partially initialised from the stage-one heads so that finetuning
//! starts from exactly the stage-one predictions.

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod tspf;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use nn::{mlp_forward, Activation, Linear, MlpParams};
pub use optim::{optimizer_step, AdamConfig, OptimState};
pub use tensor::Tensor;
