//! Fully connected networks: hidden layers apply an activation, the output
//! layer is affine.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Identity => x,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::contract(format!("unknown activation `{other}`"))),
        }
    }
}

/// One affine map: `weight` is `[out, in]`, `bias` is `[out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn glorot<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Linear {
            weight: Tensor::glorot_uniform(out_dim, in_dim, rng),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    pub frozen: bool,
}

impl MlpParams {
    /// Checks layer shapes and chaining.
    pub fn new(layers: Vec<Linear>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::contract("an MLP needs at least one layer"));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::shape(
                    "MlpParams::new",
                    format!("layer {l} weight has {} rows", layer.out_dim()),
                    format!("bias of length {}", layer.bias.len()),
                ));
            }
            if l > 0 && layers[l - 1].out_dim() != layer.in_dim() {
                return Err(Error::shape(
                    "MlpParams::new",
                    format!("layer {} output dim {}", l - 1, layers[l - 1].out_dim()),
                    format!("layer {l} input dim {}", layer.in_dim()),
                ));
            }
        }
        Ok(MlpParams {
            layers,
            activation,
            frozen: false,
        })
    }

    /// Fresh Glorot-initialised network through `widths = [in, h1, ..., out]`.
    pub fn init<R: Rng + ?Sized>(
        widths: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::contract(format!("invalid MLP widths {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .map(|w| Linear::glorot(w[0], w[1], rng))
            .collect();
        MlpParams::new(layers, activation)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// `[in, h1, ..., out]`
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.in_dim())
            .chain(self.layers.iter().map(Linear::out_dim))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// Puts the parameters on the tape: as gradient leaves, or as constants
    /// when frozen.
    pub fn bind(&self, g: &mut Graph) -> BoundMlp {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                if self.frozen {
                    (g.constant(l.weight.clone()), g.constant(l.bias.clone()))
                } else {
                    (g.param(l.weight.clone()), g.param(l.bias.clone()))
                }
            })
            .collect();
        BoundMlp {
            layers,
            activation: self.activation,
        }
    }

    /// Like [`bind`](Self::bind) but always as constants.
    pub fn bind_constant(&self, g: &mut Graph) -> BoundMlp {
        let layers = self
            .layers
            .iter()
            .map(|l| (g.constant(l.weight.clone()), g.constant(l.bias.clone())))
            .collect();
        BoundMlp {
            layers,
            activation: self.activation,
        }
    }

    /// Plain evaluation with no gradient record.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        mlp_forward(self, input)
    }
}

/// An [`MlpParams`] whose tensors live on a [`Graph`].
#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<(Var, Var)>,
    activation: Activation,
}

impl BoundMlp {
    pub fn forward(&self, g: &mut Graph, input: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = input;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let in_dim = g.value(w).cols();
            let got = g.value(h).cols();
            if got != in_dim {
                return Err(Error::shape(
                    "mlp_forward",
                    format!("layer {l} expects input dim {in_dim}"),
                    format!("input has {got} columns"),
                ));
            }
            let z = g.matmul_t(h, w)?;
            let z = g.add_row_broadcast(z, b)?;
            h = if l == last {
                z
            } else {
                self.activation.apply(g, z)
            };
        }
        Ok(h)
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }

    /// Gradients in the order of [`MlpParams::tensors`]; `None` if any
    /// tensor received no gradient (frozen or disconnected).
    pub fn grads(&self, grads: &Gradients) -> Option<Vec<Tensor>> {
        self.vars().map(|v| grads.get(v).cloned()).collect()
    }
}

/// Evaluates `params` on `input: [batch, in_dim]` without recording a tape.
pub fn mlp_forward(params: &MlpParams, input: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let out = params.bind_constant(&mut g).forward(&mut g, x)?;
    Ok(g.value(out).clone())
}
