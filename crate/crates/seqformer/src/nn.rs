//! Learnable layers and the named parameter registry.
//!
//! Every layer registers its tensors under a dotted path so that parameter
//! counting, optimizer stepping and checkpointing all see the same ordered
//! view of the model.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Value};
use crate::tensor::{Parameter, Tensor};

/// Ordered map of dotted-path name to learnable tensor.
#[derive(Debug, Default, Clone)]
pub struct ParameterRegistry {
    entries: IndexMap<String, Parameter>,
}

impl ParameterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, param: Parameter) -> Result<Parameter> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name: {name}")));
        }
        self.entries.insert(name, param.clone());
        Ok(param)
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.entries.get(name)
    }

    /// Deterministic iteration in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn count_parameters(&self) -> usize {
        self.entries.values().map(Parameter::numel).sum()
    }

    pub fn zero_grad(&self) {
        for p in self.entries.values() {
            p.zero_grad();
        }
    }
}

/// Fills the registry deterministically: rank-2 `.weight` tensors get
/// Xavier-uniform values U(-a, a) with a = sqrt(6/(fan_in+fan_out)),
/// biases and norm offsets 0, norm gains 1.
pub fn init_xavier_uniform(registry: &ParameterRegistry, rng_seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    for (name, param) in registry.iter() {
        let shape = param.shape();
        if name.ends_with(".gain") {
            param.update_data(|d| d.iter_mut().for_each(|v| *v = 1.0));
        } else if name.ends_with(".bias") || name.ends_with(".offset") {
            param.update_data(|d| d.iter_mut().for_each(|v| *v = 0.0));
        } else if shape.len() == 2 {
            let (fan_out, fan_in) = (shape[0], shape[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            param.update_data(|d| {
                d.iter_mut()
                    .for_each(|v| *v = rng.gen_range(-bound..=bound));
            });
        } else {
            param.update_data(|d| d.iter_mut().for_each(|v| *v = 0.0));
        }
    }
}

/// Affine map along the last input dimension: y = x·weightᵀ + bias.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: Parameter,
    pub bias: Parameter,
    pub in_features: usize,
    pub out_features: usize,
}

impl LinearLayer {
    pub fn new(
        registry: &mut ParameterRegistry,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Result<Self> {
        let weight = registry.register(
            format!("{name}.weight"),
            Parameter::new(Tensor::zeros(vec![out_features, in_features])?),
        )?;
        let bias = registry.register(
            format!("{name}.bias"),
            Parameter::new(Tensor::zeros(vec![out_features])?),
        )?;
        Ok(LinearLayer {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Value) -> Result<Value> {
        let w = tape.leaf(&self.weight);
        let b = tape.leaf(&self.bias);
        tape.linear(x, w, b)
    }
}

/// Normalization over the last dimension with learned gain and offset.
/// Uses biased variance (divisor d).
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Parameter,
    pub offset: Parameter,
    pub eps: f64,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(registry: &mut ParameterRegistry, name: &str, dim: usize, eps: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::contract("LayerNorm::new", "dim >= 1", "0"));
        }
        let gain = registry.register(
            format!("{name}.gain"),
            Parameter::new(Tensor::new(vec![dim], vec![1.0; dim])?),
        )?;
        let offset = registry.register(
            format!("{name}.offset"),
            Parameter::new(Tensor::zeros(vec![dim])?),
        )?;
        Ok(LayerNorm { gain, offset, eps, dim })
    }

    pub fn forward(&self, tape: &mut Tape, x: Value) -> Result<Value> {
        let g = tape.leaf(&self.gain);
        let o = tape.leaf(&self.offset);
        tape.layer_norm(x, g, o, self.eps)
    }
}

/// Inverted dropout. Whether it acts at all is a property of the tape:
/// training tapes sample, inference tapes pass values through untouched.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0,1)")));
        }
        Ok(Dropout { p })
    }

    pub fn forward(&self, tape: &mut Tape, x: Value) -> Value {
        tape.dropout(x, self.p)
    }
}
