//! Flow matching on the path `x_t = t·x1 + (1 − t)·x0` with velocity target
//! `x1 − x0`, and ODE sampling from noise at `t = 0` to data at `t = 1`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::conditioning::Strategy;
use crate::error::{Error, Result};
use crate::networks::{BoundParams, Dropout, Model, ScalarCond};
use crate::rng::normal_tensor;
use crate::tensor::Tensor;

/// Data coefficient of the path.
pub fn path_beta(t: f64) -> f64 {
    t
}

/// Noise coefficient of the path.
pub fn path_gamma(t: f64) -> f64 {
    1.0 - t
}

pub fn path_point(x1: &Tensor, x0: &Tensor, t: f64) -> Result<Tensor> {
    check_time(t)?;
    let (b, g) = (path_beta(t), path_gamma(t));
    x1.zip_map(x0, |a, z| b * a + g * z)
}

pub fn velocity_target(x1: &Tensor, x0: &Tensor) -> Result<Tensor> {
    x1.zip_map(x0, |a, z| a - z)
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("flow time {} outside [0, 1]", t)));
    }
    Ok(())
}

/// Conditioning for time `t`: λ sees `t`, the maps see `t` and the noise
/// coefficient `1 − t`, FiLM embeds `1000·t` so its frequencies match the
/// diffusion step range.
pub fn flow_cond(t: f64) -> ScalarCond {
    ScalarCond {
        s: t,
        t_map: t,
        sigma_map: 1.0 - t,
        embed: 1000.0 * t,
        sigma: 1.0 - t,
    }
}

pub trait VelocityModel {
    fn predict_velocity(&self, x: &Tensor, t: f64) -> Result<Tensor>;
}

impl VelocityModel for Model {
    fn predict_velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        reject_rescaling(self)?;
        self.predict(x, &flow_cond(t))
    }
}

fn reject_rescaling(model: &Model) -> Result<()> {
    if model.strategy() == Strategy::Ncsnv2 {
        return Err(Error::Config("ncsnv2 conditioning applies to diffusion only".into()));
    }
    Ok(())
}

/// Uniform `t ∈ [0, 1)` and independent noise endpoints shaped like `shape`.
pub fn draw_time_and_noise(shape: &[usize], rng: &mut ChaCha8Rng) -> (f64, Tensor) {
    let t = rng.gen::<f64>();
    (t, normal_tensor(shape, rng))
}

/// Mean-square velocity error on data `x1` with one drawn time and noise.
pub fn flow_loss(model: &impl VelocityModel, x1: &Tensor, rng: &mut ChaCha8Rng) -> Result<f64> {
    let (t, x0) = draw_time_and_noise(x1.shape(), rng);
    let xt = path_point(x1, &x0, t)?;
    let pred = model.predict_velocity(&xt, t)?;
    crate::diffusion::mean_square_diff(&pred, &velocity_target(x1, &x0)?)
}

/// Training loss on the tape for given time and noise endpoint.
pub fn flow_loss_on_tape(
    tape: &mut Tape,
    model: &Model,
    bound: &BoundParams,
    x1: &Tensor,
    x0: &Tensor,
    t: f64,
    dropout: Option<&mut Dropout>,
) -> Result<Var> {
    reject_rescaling(model)?;
    let xt = tape.constant(path_point(x1, x0, t)?);
    let target = tape.constant(velocity_target(x1, x0)?);
    let pred = model.forward(tape, bound, xt, &flow_cond(t), dropout)?;
    tape.mse(pred, target)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Solver {
    #[default]
    Euler,
    Heun,
}

impl fmt::Display for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Solver::Euler => "euler",
            Solver::Heun => "heun",
        })
    }
}

impl FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Solver::Euler),
            "heun" => Ok(Solver::Heun),
            other => Err(Error::Config(format!("unknown ODE solver '{}'", other))),
        }
    }
}

/// Integrates `dx/dt = v(x, t)` from `x_start` at `t = 0` to `t = 1` in
/// `n_steps` uniform steps.
pub fn ode_sample(model: &impl VelocityModel, n_steps: usize, x_start: Tensor, solver: Solver) -> Result<Tensor> {
    if n_steps == 0 {
        return Err(Error::Config("ODE sampling needs at least one step".into()));
    }
    let dt = 1.0 / n_steps as f64;
    let mut x = x_start;
    for k in 0..n_steps {
        let t = k as f64 * dt;
        let v = model.predict_velocity(&x, t)?;
        x = match solver {
            Solver::Euler => x.zip_map(&v, |a, b| a + dt * b)?,
            Solver::Heun => {
                let t_next = ((k + 1) as f64 * dt).min(1.0);
                let trial = x.zip_map(&v, |a, b| a + dt * b)?;
                let v2 = model.predict_velocity(&trial, t_next)?;
                let avg = v.zip_map(&v2, |a, b| 0.5 * (a + b))?;
                x.zip_map(&avg, |a, b| a + dt * b)?
            }
        };
        if !x.all_finite() {
            return Err(Error::Numeric(format!("non-finite ODE state at t = {}", t)));
        }
    }
    Ok(x)
}

/// ODE sampling from `batch` fresh noise draws of per-sample shape `shape`.
pub fn ode_sample_batch(
    model: &impl VelocityModel,
    n_steps: usize,
    batch: usize,
    shape: &[usize],
    solver: Solver,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let mut full = vec![batch];
    full.extend_from_slice(shape);
    ode_sample(model, n_steps, normal_tensor(&full, rng), solver)
}

#[cfg(test)]
mod tests;
