//! Variance-preserving diffusion: schedule, corruption, losses, Tweedie
//! conversions and deterministic DDIM sampling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::conditioning::Strategy;
use crate::error::{Error, Result};
use crate::networks::{BoundParams, Dropout, Model, ScalarCond};
use crate::rng::normal_tensor;
use crate::tensor::Tensor;

/// Linear-β schedule with derived `ᾱ_t` and `σ_t = sqrt((1 − ᾱ_t)/ᾱ_t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VpSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

/// `β_i = β_min + i/(T−1)·(β_max − β_min)` for `i` in `0..T`.
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<VpSchedule> {
    if steps == 0 {
        return Err(Error::Config("diffusion needs at least one step".into()));
    }
    if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_min < beta_max < 1, got {} and {}",
            beta_min, beta_max
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_min
            } else {
                beta_min + (i as f64 / (steps - 1) as f64) * (beta_max - beta_min)
            }
        })
        .collect();
    VpSchedule::from_betas(beta)
}

impl VpSchedule {
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Config("every β must lie in (0, 1)".into()));
        }
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut prod = 1.0;
        for b in &beta {
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        let sigma = alpha_bar.iter().map(|a| ((1.0 - a) / a).sqrt()).collect();
        Ok(Self { beta, alpha_bar, sigma })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::Domain(format!("step {} outside 0..{}", t, self.steps())));
        }
        Ok(())
    }

    /// The scalar conditioning for step `t`: λ and FiLM see `t`, the maps
    /// see `t/T` and `σ_t`, and rescaling divides by `σ_t`.
    pub fn cond(&self, t: usize) -> ScalarCond {
        ScalarCond {
            s: t as f64,
            t_map: t as f64 / self.steps() as f64,
            sigma_map: self.sigma[t],
            embed: t as f64,
            sigma: self.sigma[t],
        }
    }
}

/// `sqrt(ᾱ_t)·x0 + sqrt(1 − ᾱ_t)·ε`.
pub fn corrupt(x0: &Tensor, t: usize, eps: &Tensor, sched: &VpSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    let a = sched.alpha_bar[t];
    let (ca, cb) = (a.sqrt(), (1.0 - a).sqrt());
    x0.zip_map(eps, |x, e| ca * x + cb * e)
}

/// Posterior-mean estimate `(x_t − sqrt(1 − ᾱ_t)·ε̂)/sqrt(ᾱ_t)`.
pub fn tweedie_denoise(x_t: &Tensor, eps_hat: &Tensor, t: usize, sched: &VpSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    let a = sched.alpha_bar[t];
    let (ra, rb) = (a.sqrt(), (1.0 - a).sqrt());
    x_t.zip_map(eps_hat, |x, e| (x - rb * e) / ra)
}

/// Score in `x_t` coordinates: `−ε̂/sqrt(1 − ᾱ_t)`.
pub fn score_from_eps(eps_hat: &Tensor, t: usize, sched: &VpSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    let rb = (1.0 - sched.alpha_bar[t]).sqrt();
    Ok(eps_hat.map(|e| -e / rb))
}

/// Anything that predicts the noise in `x_t` at step `t`.
pub trait EpsModel {
    fn predict_eps(&self, x_t: &Tensor, t: usize, sched: &VpSchedule) -> Result<Tensor>;
}

impl EpsModel for Model {
    fn predict_eps(&self, x_t: &Tensor, t: usize, sched: &VpSchedule) -> Result<Tensor> {
        sched.check_step(t)?;
        let cond = sched.cond(t);
        if self.strategy() == Strategy::Ncsnv2 {
            // The network scores x̄ = x_t/sqrt(ᾱ_t); ε̂ = −σ_t·s(x̄).
            let ra = sched.alpha_bar[t].sqrt();
            let xbar = x_t.map(|v| v / ra);
            let score = self.predict(&xbar, &cond)?;
            Ok(score.map(|v| -cond.sigma * v))
        } else {
            self.predict(x_t, &cond)
        }
    }
}

/// Uniform step `t ∈ {0, …, T−1}` and standard normal noise shaped like
/// `shape`.
pub fn draw_step_and_noise(shape: &[usize], sched: &VpSchedule, rng: &mut ChaCha8Rng) -> (usize, Tensor) {
    let t = rng.gen_range(0..sched.steps());
    (t, normal_tensor(shape, rng))
}

/// Mean-square ε error of `model` on `x0` with one drawn step and noise.
pub fn epsilon_loss(model: &impl EpsModel, x0: &Tensor, sched: &VpSchedule, rng: &mut ChaCha8Rng) -> Result<f64> {
    let (t, eps) = draw_step_and_noise(x0.shape(), sched, rng);
    let x_t = corrupt(x0, t, &eps, sched)?;
    let pred = model.predict_eps(&x_t, t, sched)?;
    mean_square_diff(&pred, &eps)
}

/// σ²-weighted score matching in rescaled coordinates `x̄ = x0 + σ_t·ε` for
/// a model conditioned by output rescaling.
pub fn ncsnv2_loss(model: &Model, x0: &Tensor, sched: &VpSchedule, rng: &mut ChaCha8Rng) -> Result<f64> {
    if model.strategy() != Strategy::Ncsnv2 {
        return Err(Error::Config(format!(
            "score-matching loss needs ncsnv2 conditioning, model uses {}",
            model.strategy()
        )));
    }
    ncsnv2_loss_with(|xbar, t| model.predict(xbar, &sched.cond(t)), x0, sched, rng)
}

/// The mean of `‖σ_t·s(x̄) + ε‖²` over one drawn step and noise, with
/// `score(x̄, t)` supplied by the caller.
pub fn ncsnv2_loss_with(
    score: impl Fn(&Tensor, usize) -> Result<Tensor>,
    x0: &Tensor,
    sched: &VpSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (t, eps) = draw_step_and_noise(x0.shape(), sched, rng);
    let sigma = sched.sigma[t];
    let xbar = x0.zip_map(&eps, |x, e| x + sigma * e)?;
    let s = score(&xbar, t)?;
    let scaled = s.map(|v| sigma * v);
    mean_square_diff(&scaled, &eps.map(|e| -e))
}

pub(crate) fn mean_square_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    let d = a.zip_map(b, |x, y| (x - y) * (x - y))?;
    Ok(if d.is_empty() { 0.0 } else { d.sum() / d.len() as f64 })
}

/// Training loss of a conditioned model on the tape for a given step and
/// noise: ε-MSE for every strategy except `ncsnv2`, which uses the
/// rescaled score-matching objective.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss_on_tape(
    tape: &mut Tape,
    model: &Model,
    bound: &BoundParams,
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &VpSchedule,
    dropout: Option<&mut Dropout>,
) -> Result<Var> {
    sched.check_step(t)?;
    let cond = sched.cond(t);
    let target = tape.constant(eps.clone());
    if model.strategy() == Strategy::Ncsnv2 {
        let sigma = cond.sigma;
        let xbar = tape.constant(x0.zip_map(eps, |x, e| x + sigma * e)?);
        let s = model.forward(tape, bound, xbar, &cond, dropout)?;
        // ‖σ·s + ε‖² = ‖σ·s − (−ε)‖².
        let scaled = tape.scale(s, sigma);
        let neg = tape.scale(target, -1.0);
        tape.mse(scaled, neg)
    } else {
        let x_t = tape.constant(corrupt(x0, t, eps, sched)?);
        let pred = model.forward(tape, bound, x_t, &cond, dropout)?;
        tape.mse(pred, target)
    }
}

/// Decreasing DDIM timesteps, a uniform integer stride over `[0, T−1]`
/// including both ends.
pub fn ddim_timesteps(steps: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > steps {
        return Err(Error::Config(format!("DDIM needs 1 ≤ n_steps ≤ {}, got {}", steps, n)));
    }
    if n == 1 {
        return Ok(vec![steps - 1]);
    }
    let span = (steps - 1) as f64;
    Ok((0..n)
        .rev()
        .map(|k| (k as f64 * span / (n - 1) as f64).round() as usize)
        .collect())
}

/// Deterministic DDIM from the starting noise `x_start`. Returns `x̂0` at
/// the final step.
pub fn ddim_sample(model: &impl EpsModel, sched: &VpSchedule, n_steps: usize, x_start: Tensor) -> Result<Tensor> {
    let taus = ddim_timesteps(sched.steps(), n_steps)?;
    let mut x = x_start;
    for (k, &tau) in taus.iter().enumerate() {
        let eps_hat = model.predict_eps(&x, tau, sched)?;
        let x0_hat = tweedie_denoise(&x, &eps_hat, tau, sched)?;
        match taus.get(k + 1) {
            Some(&next) => {
                let a = sched.alpha_bar[next];
                let (ra, rb) = (a.sqrt(), (1.0 - a).sqrt());
                x = x0_hat.zip_map(&eps_hat, |x0, e| ra * x0 + rb * e)?;
            }
            None => x = x0_hat,
        }
        if !x.all_finite() {
            return Err(Error::Numeric(format!("non-finite DDIM state at step {}", tau)));
        }
    }
    Ok(x)
}

/// DDIM on `batch` fresh chains of per-sample shape `shape`.
pub fn ddim_sample_batch(
    model: &impl EpsModel,
    sched: &VpSchedule,
    n_steps: usize,
    batch: usize,
    shape: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let mut full = vec![batch];
    full.extend_from_slice(shape);
    ddim_sample(model, sched, n_steps, normal_tensor(&full, rng))
}
