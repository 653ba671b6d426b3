//! AdamW training loops for both frameworks, with EMA, metrics and
//! checkpoints.

mod checkpoint;
mod config;
mod optim;

use std::path::Path;
use std::time::Instant;

pub use checkpoint::{Checkpoint, NamedTensors, FORMAT_VERSION, MAGIC};
pub use config::{ArchKind, Framework, RunConfig, KEYS};
pub use optim::{adamw_step, ema_update, AdamHyper, AdamW, Ema, GroupSettings};

use crate::autodiff::Tape;
use crate::diffusion::{self, make_schedule, EpsModel, VpSchedule};
use crate::error::{Error, Result};
use crate::flow::{self, VelocityModel};
use crate::networks::{ArchSpec, Dropout, Model, ModelSpec};
use crate::oracle::GaussianOracle;
use crate::rng::{normal_tensor, stream, Domain};
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "iteration,loss,wall_seconds,lambda_l1_delta";

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub iteration: u64,
    /// Mean training loss since the previous row.
    pub loss: f64,
    pub wall_seconds: f64,
    /// `‖λ − linear‖₁ / S` on the grid; 0 without interpolation.
    pub lambda_l1_delta: f64,
}

pub fn write_metrics_csv(rows: &[MetricRow], mut out: impl std::io::Write) -> Result<()> {
    writeln!(out, "{}", METRICS_HEADER)?;
    for r in rows {
        writeln!(out, "{},{:?},{:?},{:?}", r.iteration, r.loss, r.wall_seconds, r.lambda_l1_delta)?;
    }
    Ok(())
}

/// Noise schedule for a diffusion config, `None` for flow.
pub fn schedule_for(cfg: &RunConfig) -> Result<Option<VpSchedule>> {
    match cfg.framework {
        Framework::Diffusion => make_schedule(cfg.diffusion_steps, cfg.beta_min, cfg.beta_max).map(Some),
        Framework::Flow => Ok(None),
    }
}

/// Freshly initialized network for `cfg`. Errors for the oracle arch.
pub fn build_model(cfg: &RunConfig) -> Result<Model> {
    let arch = match cfg.arch_kind() {
        ArchKind::Mlp => ArchSpec::Mlp {
            hidden: cfg.hidden.clone(),
        },
        ArchKind::UNet => ArchSpec::UNet {
            width: cfg.unet_width,
            groups: cfg.unet_groups,
        },
        ArchKind::Oracle => return Err(Error::Config("the oracle arch has no network".into())),
    };
    Model::init(ModelSpec {
        arch,
        data_shape: cfg.dataset_spec().sample_shape(),
        strategy: cfg.conditioning,
        emb_dim: cfg.resolved_emb_dim(),
        scope: cfg.resolved_scope(),
        lambda_mode: cfg.lambda_mode,
        grid_size: cfg.grid_size,
        s_range: cfg.s_range(),
        init_scheme: cfg.init_scheme,
        seed: cfg.seed,
    })
}

fn oracle_for(cfg: &RunConfig) -> Result<GaussianOracle> {
    let spec = cfg.dataset_spec();
    GaussianOracle::new(Tensor::full(&spec.sample_shape(), cfg.gaussian_mean), cfg.gaussian_var)
}

fn groups_for(model: &Model, cfg: &RunConfig) -> Vec<GroupSettings> {
    model
        .named_tensors()
        .iter()
        .map(|(name, _)| {
            if name == "phi" {
                GroupSettings {
                    lr: cfg.lr_phi,
                    weight_decay: 0.0,
                }
            } else {
                GroupSettings {
                    lr: cfg.lr_params,
                    weight_decay: cfg.weight_decay,
                }
            }
        })
        .collect()
}

fn lambda_delta(model: &Model) -> f64 {
    model.dual().map_or(0.0, |d| d.interp().l1_from_linear())
}

/// Mutable training state: live weights, optimizer moments and EMA shadow.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: RunConfig,
    model: Model,
    optim: AdamW,
    ema: Ema,
    sched: Option<VpSchedule>,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let cfg = cfg.resolved();
        let model = build_model(&cfg)?;
        let shapes: Vec<Vec<usize>> = model.named_tensors().iter().map(|(_, t)| t.shape().to_vec()).collect();
        let optim = AdamW::new(&shapes, groups_for(&model, &cfg), AdamHyper::default())?;
        let ema = Ema::new(model.named_tensors().into_iter().map(|(_, t)| t), cfg.ema_decay);
        let sched = schedule_for(&cfg)?;
        Ok(Self {
            cfg,
            model,
            optim,
            ema,
            sched,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = RunConfig::parse_text(&ckpt.config)?;
        let mut tr = Self::new(&cfg)?;
        tr.model.load_tensors(&ckpt.params)?;
        let n = tr.model.named_tensors().len();
        let names: Vec<String> = tr.model.named_tensors().into_iter().map(|(n, _)| n).collect();
        if ckpt.optim.len() != 1 + 2 * n || ckpt.ema.len() != n {
            return Err(Error::Config("checkpoint optimizer or EMA state does not match the model".into()));
        }
        let moments = |prefix: &str, part: &[(String, Tensor)]| -> Result<Vec<Tensor>> {
            part.iter()
                .zip(&names)
                .map(|((got, t), name)| {
                    if *got == format!("{}{}", prefix, name) {
                        Ok(t.clone())
                    } else {
                        Err(Error::Config(format!("unexpected optimizer tensor '{}'", got)))
                    }
                })
                .collect()
        };
        let m = moments("optim/m/", &ckpt.optim[1..1 + n])?;
        let v = moments("optim/v/", &ckpt.optim[1 + n..])?;
        tr.optim.restore(ckpt.iteration(), m, v)?;
        let shadow = moments("", &ckpt.ema)?;
        tr.ema.restore(shadow)?;
        Ok(tr)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn iteration(&self) -> u64 {
        self.optim.step_count()
    }

    /// The live model with EMA weights swapped in.
    pub fn ema_model(&self) -> Result<Model> {
        let mut m = self.model.clone();
        let named: Vec<(String, Tensor)> = m
            .named_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .zip(self.ema.shadow().iter().cloned())
            .collect();
        m.load_tensors(&named)?;
        Ok(m)
    }

    /// Loss and gradients of one optimization step, without updating.
    /// Returns the batch loss and one gradient per learnable tensor.
    pub fn loss_and_grads(&self, step: u64) -> Result<(f64, Vec<Tensor>)> {
        let cfg = &self.cfg;
        let batch = cfg.dataset_spec().sample(cfg.batch_size, &mut stream(cfg.seed, Domain::Data, step));
        let mut noise_rng = stream(cfg.seed, Domain::Noise, step);
        let rate = cfg.resolved_dropout();
        let mut dropout = if rate > 0.0 {
            Some(Dropout::new(rate, stream(cfg.seed, Domain::Dropout, step))?)
        } else {
            None
        };
        let mb = cfg.microbatch_size();
        let shapes: Vec<Vec<usize>> = self.model.named_tensors().iter().map(|(_, t)| t.shape().to_vec()).collect();
        let mut grads: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        let mut total = 0.0;
        let mut start = 0;
        while start < cfg.batch_size {
            let len = mb.min(cfg.batch_size - start);
            let x = slice_batch(&batch, start, len)?;
            let weight = len as f64 / cfg.batch_size as f64;
            let mut tape = Tape::new();
            let bound = self.model.bind(&mut tape, true);
            let loss = match &self.sched {
                Some(sched) => {
                    let (t, eps) = diffusion::draw_step_and_noise(x.shape(), sched, &mut noise_rng);
                    diffusion::diffusion_loss_on_tape(&mut tape, &self.model, &bound, &x, t, &eps, sched, dropout.as_mut())?
                }
                None => {
                    let (t, x0) = flow::draw_time_and_noise(x.shape(), &mut noise_rng);
                    flow::flow_loss_on_tape(&mut tape, &self.model, &bound, &x, &x0, t, dropout.as_mut())?
                }
            };
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {} at iteration {}", value, step + 1)));
            }
            total += weight * value;
            let g = tape.backward(loss)?;
            for (acc, v) in grads.iter_mut().zip(bound.vars()) {
                if let Some(gv) = g.get(v) {
                    for (a, b) in acc.data_mut().iter_mut().zip(gv.data()) {
                        *a += weight * b;
                    }
                }
            }
            start += len;
        }
        Ok((total, grads))
    }

    /// One AdamW step followed by the EMA update. Returns the batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let step = self.optim.step_count();
        let (loss, grads) = self.loss_and_grads(step)?;
        if grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient at iteration {}", step + 1)));
        }
        self.optim.step(self.model.tensors_mut(), &grads)?;
        self.ema.update(self.model.named_tensors().into_iter().map(|(_, t)| t))?;
        Ok(loss)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let named = self.model.named_tensors();
        let params: NamedTensors = named.iter().map(|(n, t)| (n.clone(), (*t).clone())).collect();
        let (m, v) = self.optim.moments();
        let mut optim = vec![("optim/step".to_string(), Tensor::vector(vec![self.optim.step_count() as f64]))];
        optim.extend(named.iter().zip(m).map(|((n, _), t)| (format!("optim/m/{}", n), t.clone())));
        optim.extend(named.iter().zip(v).map(|((n, _), t)| (format!("optim/v/{}", n), t.clone())));
        let ema = named.iter().map(|(n, _)| n.clone()).zip(self.ema.shadow().iter().cloned()).collect();
        Checkpoint {
            config: self.cfg.portable_text(),
            params,
            optim,
            ema,
        }
    }

    /// Runs until `cfg.iterations` steps are done. `on_log` sees every
    /// metrics row as it is produced.
    pub fn run(&mut self, mut on_log: impl FnMut(&MetricRow)) -> Result<TrainOutcome> {
        let clock = Instant::now();
        let mut losses = Vec::new();
        let mut rows = Vec::new();
        let mut window = (0.0, 0u64);
        while self.optim.step_count() < self.cfg.iterations {
            let loss = match self.step() {
                Ok(l) => l,
                Err(e @ Error::Numeric(_)) => {
                    if let Some(dir) = &self.cfg.out {
                        let path = dir.join("abort_dump.ckpt");
                        if self.checkpoint().save(&path).is_ok() {
                            return Err(Error::Numeric(format!("{}; state dumped to {}", e, path.display())));
                        }
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            losses.push(loss);
            window.0 += loss;
            window.1 += 1;
            let it = self.optim.step_count();
            if it % self.cfg.log_every == 0 || it == self.cfg.iterations {
                let row = MetricRow {
                    iteration: it,
                    loss: window.0 / window.1 as f64,
                    wall_seconds: clock.elapsed().as_secs_f64(),
                    lambda_l1_delta: lambda_delta(&self.model),
                };
                on_log(&row);
                rows.push(row);
                window = (0.0, 0);
            }
        }
        Ok(TrainOutcome {
            checkpoint: self.checkpoint(),
            losses,
            metrics: rows,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Per-iteration batch losses.
    pub losses: Vec<f64>,
    pub metrics: Vec<MetricRow>,
}

/// Trains from scratch. The oracle arch yields an empty checkpoint that
/// carries only its config.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.arch_kind() == ArchKind::Oracle {
        return Ok(TrainOutcome {
            checkpoint: Checkpoint {
                config: cfg.resolved().portable_text(),
                params: Vec::new(),
                optim: Vec::new(),
                ema: Vec::new(),
            },
            losses: Vec::new(),
            metrics: Vec::new(),
        });
    }
    Trainer::new(cfg)?.run(|_| {})
}

fn slice_batch(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let per: usize = x.shape()[1..].iter().product();
    let mut shape = x.shape().to_vec();
    shape[0] = len;
    Tensor::new(shape, x.data()[start * per..(start + len) * per].to_vec())
}

/// A trained network with EMA weights, or the closed-form oracle.
#[derive(Clone, Debug)]
pub enum Predictor {
    Net(Box<Model>),
    Oracle(GaussianOracle),
}

/// Everything needed to evaluate a checkpoint.
#[derive(Clone, Debug)]
pub struct LoadedRun {
    pub config: RunConfig,
    pub predictor: Predictor,
    pub sched: Option<VpSchedule>,
}

impl LoadedRun {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = RunConfig::parse_text(&ckpt.config)?;
        config.validate()?;
        let predictor = match config.arch_kind() {
            ArchKind::Oracle => Predictor::Oracle(oracle_for(&config)?),
            _ => {
                let mut model = build_model(&config)?;
                let ema = if ckpt.ema.is_empty() { &ckpt.params } else { &ckpt.ema };
                model.load_tensors(ema)?;
                Predictor::Net(Box::new(model))
            }
        };
        let sched = schedule_for(&config)?;
        Ok(Self {
            config,
            predictor,
            sched,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn model(&self) -> Option<&Model> {
        match &self.predictor {
            Predictor::Net(m) => Some(m),
            Predictor::Oracle(_) => None,
        }
    }

    /// Generates `n` samples with the configured sampler and step count.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Tensor> {
        let shape = self.config.dataset_spec().sample_shape();
        if n == 0 {
            let mut full = vec![0];
            full.extend_from_slice(&shape);
            return Ok(Tensor::zeros(&full));
        }
        let mut rng = stream(seed, Domain::Sample, 0);
        let mut full = vec![n];
        full.extend_from_slice(&shape);
        let start = normal_tensor(&full, &mut rng);
        match &self.sched {
            Some(sched) => diffusion::ddim_sample(&self.predictor, sched, self.config.sample_steps, start),
            None => flow::ode_sample(&self.predictor, self.config.sample_steps, start, self.config.solver),
        }
    }
}

impl EpsModel for Predictor {
    fn predict_eps(&self, x_t: &Tensor, t: usize, sched: &VpSchedule) -> Result<Tensor> {
        match self {
            Predictor::Net(m) => m.predict_eps(x_t, t, sched),
            Predictor::Oracle(o) => o.predict_eps(x_t, t, sched),
        }
    }
}

impl VelocityModel for Predictor {
    fn predict_velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        match self {
            Predictor::Net(m) => m.predict_velocity(x, t),
            Predictor::Oracle(o) => o.predict_velocity(x, t),
        }
    }
}
