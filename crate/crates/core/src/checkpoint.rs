//! JSON checkpoints keyed by `module/layer/{weight,bias}`.
//!
//! Floats are written in shortest round-trip form, so a save/load cycle
//! reproduces every parameter bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Linear, MlpParams};
use crate::tensor::Tensor;

pub const FORMAT: &str = "tspf-checkpoint/1";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// `stage1`, `stage2`, or a baseline kind.
    pub stage: String,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleMeta {
    pub activation: Activation,
    pub frozen: bool,
    pub depth: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub manifest: Manifest,
    pub modules: BTreeMap<String, ModuleMeta>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(manifest: Manifest) -> Self {
        Checkpoint {
            format: FORMAT.to_string(),
            manifest,
            modules: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, params: &MlpParams) {
        self.modules.insert(
            name.to_string(),
            ModuleMeta {
                activation: params.activation,
                frozen: params.frozen,
                depth: params.depth(),
            },
        );
        for (l, layer) in params.layers.iter().enumerate() {
            self.tensors
                .insert(format!("{name}/{l}/weight"), layer.weight.clone());
            self.tensors
                .insert(format!("{name}/{l}/bias"), layer.bias.clone());
        }
    }

    pub fn with(mut self, name: &str, params: &MlpParams) -> Self {
        self.insert(name, params);
        self
    }

    pub fn get(&self, name: &str) -> Result<MlpParams> {
        let meta = self
            .modules
            .get(name)
            .ok_or_else(|| Error::contract(format!("checkpoint has no module `{name}`")))?;
        let fetch = |key: String| {
            self.tensors
                .get(&key)
                .cloned()
                .ok_or_else(|| Error::contract(format!("checkpoint is missing `{key}`")))
        };
        let layers = (0..meta.depth)
            .map(|l| {
                Ok(Linear {
                    weight: fetch(format!("{name}/{l}/weight"))?,
                    bias: fetch(format!("{name}/{l}/bias"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut p = MlpParams::new(layers, meta.activation)?;
        p.frozen = meta.frozen;
        Ok(p)
    }

    pub fn to_json(&self) -> Result<String> {
        if let Some((k, _)) = self.tensors.iter().find(|(_, t)| !t.all_finite()) {
            return Err(Error::Numeric(format!("non-finite value in `{k}`")));
        }
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s)?;
        if c.format != FORMAT {
            return Err(Error::contract(format!(
                "unsupported checkpoint format `{}`",
                c.format
            )));
        }
        for (k, t) in &c.tensors {
            Tensor::new(t.shape().to_vec(), t.values().to_vec())
                .map_err(|_| Error::contract(format!("tensor `{k}` has inconsistent shape")))?;
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    proptest! {
        #[test]
        fn json_round_trip_is_value_exact(seed in any::<u64>(), hidden in 1usize..6, scale in -1e6f64..1e6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = MlpParams::init(&[3, hidden, 2], Activation::Tanh, &mut rng).unwrap();
            for t in p.tensors_mut() {
                for v in t.values_mut() {
                    *v *= scale;
                }
            }
            let ck = Checkpoint::new(Manifest::default()).with("phi", &p);
            let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
            let q = back.get("phi").unwrap();
            for (a, b) in p.tensors().zip(q.tensors()) {
                let bits_a: Vec<u64> = a.values().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = b.values().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
            prop_assert_eq!(p, q);
        }
    }

    #[test]
    fn non_finite_refused() {
        let mut p =
            MlpParams::init(&[1, 1], Activation::Relu, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        p.layers[0].bias.values_mut()[0] = f64::NAN;
        let ck = Checkpoint::new(Manifest::default()).with("h0", &p);
        assert!(matches!(ck.to_json(), Err(Error::Numeric(_))));
    }

    #[test]
    fn missing_module() {
        let ck = Checkpoint::new(Manifest::default());
        assert!(ck.get("psi").is_err());
    }
}
