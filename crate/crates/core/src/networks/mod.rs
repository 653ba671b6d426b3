//! Base architectures and the conditioned model that wires a strategy into
//! them.

mod mlp;
mod unet;

pub use mlp::CondMlp;
pub use unet::TinyUNet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::conditioning::{ncsnv2_rescale, scalar_map_concat, sinusoidal_embedding, Strategy};
use crate::dpi::{DualParams, DualVars, InitScheme};
use crate::error::{Error, Result};
use crate::interp::{LambdaMode, MonotoneInterpolant};
use crate::params::{initialize_all, ParamSpec, Scope};
use crate::tensor::Tensor;

/// Flop estimate for one SiLU evaluation (exp, add, divide, multiply).
pub const SILU_FLOPS: usize = 4;
/// Flop estimate per element for group normalization with affine output.
pub const GROUP_NORM_FLOPS: usize = 7;

/// Inverted dropout: kept activations are scaled by `1/(1 − rate)`.
#[derive(Clone, Debug)]
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, rng: ChaCha8Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must lie in [0, 1), got {}", rate)));
        }
        Ok(Self { rate, rng })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn apply(&mut self, tape: &mut Tape, h: Var) -> Var {
        if self.rate == 0.0 {
            return h;
        }
        let keep = 1.0 / (1.0 - self.rate);
        let rate = self.rate;
        let rng = &mut self.rng;
        let mask = Tensor::from_fn(tape.shape(h), |_| if rng.gen::<f64>() < rate { 0.0 } else { keep });
        let m = tape.constant(mask);
        tape.mul(h, m).expect("mask matches activation shape")
    }
}

/// Architecture choice with its hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub enum ArchSpec {
    Mlp { hidden: Vec<usize> },
    UNet { width: usize, groups: usize },
}

/// Everything needed to build a conditioned model deterministically.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub arch: ArchSpec,
    /// Shape of one data sample: `[d]` for points, `[C, H, W]` for images.
    pub data_shape: Vec<usize>,
    pub strategy: Strategy,
    pub emb_dim: usize,
    pub scope: Scope,
    pub lambda_mode: LambdaMode,
    pub grid_size: usize,
    pub s_range: (f64, f64),
    pub init_scheme: InitScheme,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Arch {
    Mlp(CondMlp),
    UNet(TinyUNet),
}

impl Arch {
    pub fn manifest(&self) -> Vec<ParamSpec> {
        match self {
            Arch::Mlp(m) => m.manifest(),
            Arch::UNet(u) => u.manifest(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ParamStore {
    Single(Vec<Tensor>),
    Dual(DualParams),
}

/// Parameter handles for one forward pass.
#[derive(Clone, Debug)]
pub enum BoundParams {
    Single(Vec<Var>),
    Dual(DualVars),
}

impl BoundParams {
    /// Handles in the same order as [`Model::named_tensors`].
    pub fn vars(&self) -> Vec<Var> {
        match self {
            BoundParams::Single(v) => v.clone(),
            BoundParams::Dual(d) => d.theta0.iter().chain(&d.theta1).chain(d.phi.iter()).copied().collect(),
        }
    }
}

/// The scalar a model is conditioned on, in every form a strategy may
/// consume.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarCond {
    /// Argument of λ for interpolation.
    pub s: f64,
    /// Value of the appended map for `tmap`.
    pub t_map: f64,
    /// Value of the appended map for `sigmamap`.
    pub sigma_map: f64,
    /// Argument of the sinusoidal embedding for FiLM.
    pub embed: f64,
    /// Divisor for `ncsnv2`.
    pub sigma: f64,
}

impl ScalarCond {
    /// The same value in every slot.
    pub fn uniform(v: f64) -> Self {
        Self {
            s: v,
            t_map: v,
            sigma_map: v,
            embed: v,
            sigma: v,
        }
    }
}

/// A base network, a conditioning strategy and the learnable state.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    arch: Arch,
    params: ParamStore,
}

impl Model {
    pub fn init(spec: ModelSpec) -> Result<Self> {
        let extra = usize::from(spec.strategy.appends_map());
        let arch = match (&spec.arch, spec.data_shape.as_slice()) {
            (ArchSpec::Mlp { hidden }, &[d]) => {
                if spec.strategy == Strategy::Film {
                    return Err(Error::Config(
                        "film conditioning needs normalization layers; the MLP has none".into(),
                    ));
                }
                Arch::Mlp(CondMlp::new(d + extra, hidden.clone(), d)?)
            }
            (ArchSpec::UNet { width, groups }, &[c, h, w]) => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Config(format!("U-Net needs even image sides, got {}×{}", h, w)));
                }
                let film = (spec.strategy == Strategy::Film).then_some(spec.emb_dim);
                Arch::UNet(TinyUNet::new(c + extra, c, *width, *groups, film)?)
            }
            (arch, shape) => {
                return Err(Error::Config(format!("architecture {:?} cannot take samples of shape {:?}", arch, shape)))
            }
        };
        let manifest = arch.manifest();
        let params = if spec.strategy == Strategy::Dpi {
            let interp = MonotoneInterpolant::new(spec.lambda_mode, spec.grid_size, spec.s_range.0, spec.s_range.1)?;
            ParamStore::Dual(DualParams::init(manifest, spec.scope, interp, spec.init_scheme, spec.seed)?)
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            ParamStore::Single(initialize_all(&manifest, &mut rng))
        };
        Ok(Self { spec, arch, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn strategy(&self) -> Strategy {
        self.spec.strategy
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn dual(&self) -> Option<&DualParams> {
        match &self.params {
            ParamStore::Dual(d) => Some(d),
            ParamStore::Single(_) => None,
        }
    }

    pub fn param_manifest(&self) -> Vec<ParamSpec> {
        self.arch.manifest()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        match &self.params {
            ParamStore::Single(ts) => self.arch.manifest().into_iter().map(|s| s.name).zip(ts).collect(),
            ParamStore::Dual(d) => d.named_tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match &mut self.params {
            ParamStore::Single(ts) => ts.iter_mut().collect(),
            ParamStore::Dual(d) => d.tensors_mut(),
        }
    }

    /// Overwrites every learnable tensor from `(name, tensor)` pairs that
    /// must match [`Model::named_tensors`] in order, name and shape.
    pub fn load_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> =
            self.named_tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        if expected.len() != tensors.len() {
            return Err(Error::Config(format!(
                "model has {} tensors, stored state has {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape), (got, t)) in expected.iter().zip(tensors) {
            if name != got || shape.as_slice() != t.shape() {
                return Err(Error::Config(format!(
                    "stored tensor '{}' {:?} does not match '{}' {:?}",
                    got,
                    t.shape(),
                    name,
                    shape
                )));
            }
        }
        for (dst, (_, src)) in self.tensors_mut().into_iter().zip(tensors) {
            *dst = src.clone();
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Puts every learnable tensor on the tape.
    pub fn bind(&self, tape: &mut Tape, tracked: bool) -> BoundParams {
        match &self.params {
            ParamStore::Single(ts) => BoundParams::Single(
                ts.iter()
                    .map(|t| if tracked { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
                    .collect(),
            ),
            ParamStore::Dual(d) => BoundParams::Dual(d.bind(tape, tracked)),
        }
    }

    /// Evaluates the conditioned network on a batch `x` of shape
    /// `[B, ...data_shape]`, with one scalar for the whole batch.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: Var,
        cond: &ScalarCond,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != self.spec.data_shape.len() + 1 || shape[1..] != self.spec.data_shape[..] {
            return Err(Error::Shape(format!(
                "model expects [B, {:?}] input, got {:?}",
                self.spec.data_shape, shape
            )));
        }
        let params = match (bound, &self.params) {
            (BoundParams::Single(v), ParamStore::Single(_)) => v.clone(),
            (BoundParams::Dual(v), ParamStore::Dual(d)) => d.blend_parameters(tape, v, cond.s)?,
            _ => return Err(Error::Usage("bound parameters do not match the model".into())),
        };
        let map_value = match self.spec.strategy {
            Strategy::TMap => Some(cond.t_map),
            Strategy::SigmaMap => Some(cond.sigma_map),
            _ => None,
        };
        let out = match &self.arch {
            Arch::Mlp(mlp) => {
                let input = match map_value {
                    Some(v) => scalar_map_concat(tape, x, v)?,
                    None => x,
                };
                mlp.forward(tape, &params, input, dropout)?
            }
            Arch::UNet(unet) => {
                let film = if self.spec.strategy == Strategy::Film {
                    let emb = tape.constant(sinusoidal_embedding(cond.embed, self.spec.emb_dim)?);
                    Some(unet.film_coefficients(tape, &params, emb)?)
                } else {
                    None
                };
                let mut one = shape.clone();
                one[0] = 1;
                let mut outs = Vec::with_capacity(shape[0]);
                for b in 0..shape[0] {
                    let xb = tape.slice_rows(x, b, 1)?;
                    let xb = tape.reshape(xb, &shape[1..])?;
                    let xb = match map_value {
                        Some(v) => scalar_map_concat(tape, xb, v)?,
                        None => xb,
                    };
                    let yb = unet.forward(tape, &params, xb, film.as_deref(), dropout.as_deref_mut())?;
                    outs.push(tape.reshape(yb, &one)?);
                }
                tape.concat_rows(&outs)?
            }
        };
        if self.spec.strategy == Strategy::Ncsnv2 {
            ncsnv2_rescale(tape, out, cond.sigma)
        } else {
            Ok(out)
        }
    }

    /// Evaluates without gradient tracking and returns the output values.
    pub fn predict(&self, x: &Tensor, cond: &ScalarCond) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &bound, xv, cond, None)?;
        Ok(tape.value(y).clone())
    }

    /// Flop estimate of the base network on a batch, excluding blending.
    pub fn forward_flops(&self, batch: usize) -> usize {
        match &self.arch {
            Arch::Mlp(m) => m.forward_flops(batch),
            Arch::UNet(u) => u.forward_flops(batch, self.spec.data_shape[1], self.spec.data_shape[2]),
        }
    }
}
