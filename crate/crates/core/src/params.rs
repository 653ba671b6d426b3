//! Named parameter collections and initialization.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    LinearWeight,
    LinearBias,
    NormParam,
}

impl ParamKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::ConvWeight => "conv_weight",
            ParamKind::ConvBias => "conv_bias",
            ParamKind::LinearWeight => "linear_weight",
            ParamKind::LinearBias => "linear_bias",
            ParamKind::NormParam => "norm_param",
        }
    }
}

impl fmt::Display for ParamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform on `±sqrt(1/fan_in)`.
    FanInUniform(usize),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], kind: ParamKind, init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            kind,
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn initialize(&self, rng: &mut impl Rng) -> Tensor {
        match self.init {
            Init::FanInUniform(fan_in) => {
                let bound = (1.0 / fan_in as f64).sqrt();
                Tensor::from_fn(&self.shape, |_| rng.gen_range(-bound..bound))
            }
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::Ones => Tensor::ones(&self.shape),
        }
    }
}

pub fn initialize_all(specs: &[ParamSpec], rng: &mut impl Rng) -> Vec<Tensor> {
    specs.iter().map(|s| s.initialize(rng)).collect()
}

pub fn total_numel(specs: &[ParamSpec]) -> usize {
    specs.iter().map(ParamSpec::numel).sum()
}

/// The parameter kinds that deep parameter interpolation duplicates and
/// blends. Everything outside the scope exists once and is shared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Scope {
    pub weights: bool,
    pub biases: bool,
    pub norm: bool,
}

impl Scope {
    pub const WEIGHTS: Scope = Scope {
        weights: true,
        biases: false,
        norm: false,
    };
    pub const ALL: Scope = Scope {
        weights: true,
        biases: true,
        norm: true,
    };
    pub const EMPTY: Scope = Scope {
        weights: false,
        biases: false,
        norm: false,
    };

    pub fn contains(&self, kind: ParamKind) -> bool {
        match kind {
            ParamKind::ConvWeight | ParamKind::LinearWeight => self.weights,
            ParamKind::ConvBias | ParamKind::LinearBias => self.biases,
            ParamKind::NormParam => self.norm,
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.weights || self.biases || self.norm)
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.weights {
            parts.push("weights");
        }
        if self.biases {
            parts.push("biases");
        }
        if self.norm {
            parts.push("norm");
        }
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join(","))
        }
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut scope = Scope::EMPTY;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "weights" => scope.weights = true,
                "biases" => scope.biases = true,
                "norm" => scope.norm = true,
                "none" => {}
                other => return Err(Error::Config(format!("unknown interpolation scope '{}'", other))),
            }
        }
        Ok(scope)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn scope_parses_and_prints() {
        let s: Scope = "weights,norm".parse().unwrap();
        assert!(s.contains(ParamKind::ConvWeight) && s.contains(ParamKind::LinearWeight));
        assert!(s.contains(ParamKind::NormParam) && !s.contains(ParamKind::ConvBias));
        assert_eq!(s.to_string(), "weights,norm");
        assert_eq!("none".parse::<Scope>().unwrap(), Scope::EMPTY);
        assert!("gains".parse::<Scope>().is_err());
    }

    #[test]
    fn fan_in_init_is_bounded() {
        let spec = ParamSpec::new("w", &[16, 8], ParamKind::LinearWeight, Init::FanInUniform(16));
        let t = spec.initialize(&mut ChaCha8Rng::seed_from_u64(0));
        assert!(t.data().iter().all(|v| v.abs() <= 0.25));
        assert!(t.data().iter().any(|v| *v != 0.0));
    }
}
