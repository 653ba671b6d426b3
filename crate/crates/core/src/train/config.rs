//! Run configuration and its `key = value` text form.

use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use crate::conditioning::Strategy;
use crate::data::{DatasetKind, DatasetSpec};
use crate::dpi::InitScheme;
use crate::error::{Error, Result};
use crate::flow::Solver;
use crate::interp::LambdaMode;
use crate::params::Scope;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Framework {
    Diffusion,
    Flow,
}

impl fmt::Display for Framework {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Framework::Diffusion => "diffusion",
            Framework::Flow => "flow",
        })
    }
}

impl FromStr for Framework {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diffusion" => Ok(Framework::Diffusion),
            "flow" => Ok(Framework::Flow),
            other => Err(Error::Config(format!("unknown framework '{}' (expected diffusion|flow)", other))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchKind {
    Mlp,
    UNet,
    /// Closed-form predictor for the `gaussian` dataset; nothing to train.
    Oracle,
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchKind::Mlp => "mlp",
            ArchKind::UNet => "unet",
            ArchKind::Oracle => "oracle",
        })
    }
}

impl FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(ArchKind::Mlp),
            "unet" => Ok(ArchKind::UNet),
            "oracle" => Ok(ArchKind::Oracle),
            other => Err(Error::Config(format!("unknown arch '{}' (expected mlp|unet|oracle)", other))),
        }
    }
}

/// Full description of one training run. Fields left as `None` resolve
/// from the dataset: images get the U-Net, dropout 0.1, embedding width 64
/// and full interpolation scope; points get the MLP, no dropout, embedding
/// width 32 and weights-only scope.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub framework: Framework,
    pub conditioning: Strategy,
    pub dataset: DatasetKind,
    pub arch: Option<ArchKind>,
    pub iterations: u64,
    pub batch_size: usize,
    /// Samples sharing one scalar draw; 0 means the whole batch.
    pub microbatch: usize,
    pub lr_params: f64,
    pub lr_phi: f64,
    pub weight_decay: f64,
    pub dropout: Option<f64>,
    pub ema_decay: f64,
    pub seed: u64,
    pub lambda_mode: LambdaMode,
    pub scope: Option<Scope>,
    pub grid_size: usize,
    pub init_scheme: InitScheme,
    pub hidden: Vec<usize>,
    pub unet_width: usize,
    pub unet_groups: usize,
    pub emb_dim: Option<usize>,
    pub diffusion_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub solver: Solver,
    pub sample_steps: usize,
    pub log_every: u64,
    pub gauss8_std: f64,
    pub image_size: usize,
    pub gaussian_dim: usize,
    pub gaussian_mean: f64,
    pub gaussian_var: f64,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            framework: Framework::Diffusion,
            conditioning: Strategy::Dpi,
            dataset: DatasetKind::Gauss8,
            arch: None,
            iterations: 20_000,
            batch_size: 128,
            microbatch: 0,
            lr_params: 1e-3,
            lr_phi: 1e-3,
            weight_decay: 0.05,
            dropout: None,
            ema_decay: 0.999,
            seed: 0,
            lambda_mode: LambdaMode::ExactEndpoint,
            scope: None,
            grid_size: 1000,
            init_scheme: InitScheme::Independent,
            hidden: vec![128, 128, 128],
            unet_width: 16,
            unet_groups: 4,
            emb_dim: None,
            diffusion_steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
            solver: Solver::Euler,
            sample_steps: 200,
            log_every: 100,
            gauss8_std: 0.05,
            image_size: 8,
            gaussian_dim: 2,
            gaussian_mean: 0.0,
            gaussian_var: 1.0,
            out: None,
        }
    }
}

/// Every accepted key, in the order the resolved text lists them.
pub const KEYS: [&str; 33] = [
    "framework",
    "conditioning",
    "dataset",
    "arch",
    "iterations",
    "batch_size",
    "microbatch",
    "lr_params",
    "lr_phi",
    "weight_decay",
    "dropout",
    "ema_decay",
    "seed",
    "lambda_mode",
    "scope",
    "grid_size",
    "init_scheme",
    "hidden",
    "unet_width",
    "unet_groups",
    "emb_dim",
    "diffusion_steps",
    "beta_min",
    "beta_max",
    "solver",
    "sample_steps",
    "log_every",
    "gauss8_std",
    "image_size",
    "gaussian_dim",
    "gaussian_mean",
    "gaussian_var",
    "out",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{}' for '{}'", value, key)))
}

fn parse_auto<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl RunConfig {
    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "framework" => self.framework = v.parse()?,
            "conditioning" => self.conditioning = v.parse()?,
            "dataset" => self.dataset = v.parse()?,
            "arch" => {
                self.arch = if v == "auto" { None } else { Some(v.parse()?) };
            }
            "iterations" => self.iterations = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "microbatch" => self.microbatch = parse(key, v)?,
            "lr_params" => self.lr_params = parse(key, v)?,
            "lr_phi" => self.lr_phi = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "dropout" => self.dropout = parse_auto(key, v)?,
            "ema_decay" => self.ema_decay = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "lambda_mode" => self.lambda_mode = v.parse()?,
            "scope" => {
                self.scope = if v == "auto" { None } else { Some(v.parse()?) };
            }
            "grid_size" => self.grid_size = parse(key, v)?,
            "init_scheme" => self.init_scheme = v.parse()?,
            "hidden" => {
                self.hidden = v
                    .split(',')
                    .map(|w| parse::<usize>(key, w.trim()))
                    .collect::<Result<_>>()?;
            }
            "unet_width" => self.unet_width = parse(key, v)?,
            "unet_groups" => self.unet_groups = parse(key, v)?,
            "emb_dim" => self.emb_dim = parse_auto(key, v)?,
            "diffusion_steps" => self.diffusion_steps = parse(key, v)?,
            "beta_min" => self.beta_min = parse(key, v)?,
            "beta_max" => self.beta_max = parse(key, v)?,
            "solver" => self.solver = v.parse()?,
            "sample_steps" => self.sample_steps = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            "gauss8_std" => self.gauss8_std = parse(key, v)?,
            "image_size" => self.image_size = parse(key, v)?,
            "gaussian_dim" => self.gaussian_dim = parse(key, v)?,
            "gaussian_mean" => self.gaussian_mean = parse(key, v)?,
            "gaussian_var" => self.gaussian_var = parse(key, v)?,
            "out" => self.out = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            other => return Err(Error::Config(format!("unknown config key '{}'", other))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment;
    /// blank lines are ignored; repeated keys keep the last value.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', got '{}'", n + 1, raw)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    pub fn arch_kind(&self) -> ArchKind {
        self.arch.unwrap_or(if self.dataset.is_image() { ArchKind::UNet } else { ArchKind::Mlp })
    }

    pub fn resolved_dropout(&self) -> f64 {
        self.dropout.unwrap_or(if self.dataset.is_image() { 0.1 } else { 0.0 })
    }

    pub fn resolved_scope(&self) -> Scope {
        self.scope.unwrap_or(match self.arch_kind() {
            ArchKind::UNet => Scope::ALL,
            _ => Scope::WEIGHTS,
        })
    }

    pub fn resolved_emb_dim(&self) -> usize {
        self.emb_dim.unwrap_or(match self.arch_kind() {
            ArchKind::UNet => 64,
            _ => 32,
        })
    }

    pub fn microbatch_size(&self) -> usize {
        if self.microbatch == 0 {
            self.batch_size
        } else {
            self.microbatch.min(self.batch_size)
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            kind: self.dataset,
            gauss8_std: self.gauss8_std,
            image_size: self.image_size,
            gaussian_dim: self.gaussian_dim,
            gaussian_mean: self.gaussian_mean,
            gaussian_var: self.gaussian_var,
        }
    }

    /// Range of the interpolation scalar: diffusion steps or flow time.
    pub fn s_range(&self) -> (f64, f64) {
        match self.framework {
            Framework::Diffusion => (0.0, (self.diffusion_steps - 1) as f64),
            Framework::Flow => (0.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_params", self.lr_params),
            ("lr_phi", self.lr_phi),
            ("beta_min", self.beta_min),
            ("beta_max", self.beta_max),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{} must be positive, got {}", k, v)));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be ≥ 0".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.resolved_dropout()) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.log_every == 0 || self.sample_steps == 0 {
            return Err(Error::Config("batch_size, log_every and sample_steps must be positive".into()));
        }
        if self.grid_size < 2 || self.diffusion_steps < 2 {
            return Err(Error::Config("grid_size and diffusion_steps must be at least 2".into()));
        }
        if self.framework == Framework::Flow && self.conditioning == Strategy::Ncsnv2 {
            return Err(Error::Config("ncsnv2 conditioning applies to diffusion only".into()));
        }
        match (self.arch_kind(), self.dataset.is_image()) {
            (ArchKind::Mlp, true) => return Err(Error::Config("the MLP takes point data, not images".into())),
            (ArchKind::UNet, false) => return Err(Error::Config("the U-Net takes image data".into())),
            (ArchKind::Mlp, false) if self.conditioning == Strategy::Film => {
                return Err(Error::Config(
                    "film conditioning needs normalization layers; the MLP has none".into(),
                ))
            }
            (ArchKind::Oracle, _) => {
                if self.dataset != DatasetKind::Gaussian {
                    return Err(Error::Config("the oracle needs the gaussian dataset".into()));
                }
                if self.iterations != 0 {
                    return Err(Error::Config("the oracle has nothing to train; set iterations = 0".into()));
                }
            }
            _ => {}
        }
        if self.diffusion_steps < self.sample_steps && self.framework == Framework::Diffusion {
            return Err(Error::Config("sample_steps cannot exceed diffusion_steps".into()));
        }
        self.dataset_spec().validate()
    }

    /// Every key with its resolved value, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        let out = self.out.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let rows: [(&str, String); 33] = [
            ("framework", self.framework.to_string()),
            ("conditioning", self.conditioning.to_string()),
            ("dataset", self.dataset.to_string()),
            ("arch", self.arch_kind().to_string()),
            ("iterations", self.iterations.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("microbatch", self.microbatch_size().to_string()),
            ("lr_params", format!("{:?}", self.lr_params)),
            ("lr_phi", format!("{:?}", self.lr_phi)),
            ("weight_decay", format!("{:?}", self.weight_decay)),
            ("dropout", format!("{:?}", self.resolved_dropout())),
            ("ema_decay", format!("{:?}", self.ema_decay)),
            ("seed", self.seed.to_string()),
            ("lambda_mode", self.lambda_mode.to_string()),
            ("scope", self.resolved_scope().to_string()),
            ("grid_size", self.grid_size.to_string()),
            ("init_scheme", self.init_scheme.to_string()),
            ("hidden", hidden.join(",")),
            ("unet_width", self.unet_width.to_string()),
            ("unet_groups", self.unet_groups.to_string()),
            ("emb_dim", self.resolved_emb_dim().to_string()),
            ("diffusion_steps", self.diffusion_steps.to_string()),
            ("beta_min", format!("{:?}", self.beta_min)),
            ("beta_max", format!("{:?}", self.beta_max)),
            ("solver", self.solver.to_string()),
            ("sample_steps", self.sample_steps.to_string()),
            ("log_every", self.log_every.to_string()),
            ("gauss8_std", format!("{:?}", self.gauss8_std)),
            ("image_size", self.image_size.to_string()),
            ("gaussian_dim", self.gaussian_dim.to_string()),
            ("gaussian_mean", format!("{:?}", self.gaussian_mean)),
            ("gaussian_var", format!("{:?}", self.gaussian_var)),
            ("out", out),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{} = {}", k, v);
        }
        s
    }

    /// `to_text` without the output directory, so a checkpoint does not
    /// depend on where it was written.
    pub fn portable_text(&self) -> String {
        RunConfig { out: None, ..self.clone() }.to_text()
    }

    /// The resolved form: every `auto` field replaced by its value.
    pub fn resolved(&self) -> RunConfig {
        RunConfig::parse_text(&self.to_text()).expect("resolved text parses")
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
