//! Closed-form predictors for data drawn from an isotropic Gaussian
//! `N(μ, v·I)`. With `v = 0` the data is a single point.

use crate::diffusion::{EpsModel, VpSchedule};
use crate::error::{Error, Result};
use crate::flow::VelocityModel;
use crate::tensor::Tensor;

const DENOM_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianOracle {
    mean: Tensor,
    var: f64,
}

impl GaussianOracle {
    /// `mean` has the shape of one sample.
    pub fn new(mean: Tensor, var: f64) -> Result<Self> {
        if !(var >= 0.0) || !var.is_finite() {
            return Err(Error::Config(format!("oracle variance must be finite and ≥ 0, got {}", var)));
        }
        Ok(Self { mean, var })
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn var(&self) -> f64 {
        self.var
    }

    /// Applies `f(x, μ)` elementwise to a batch `[B, ...sample]`.
    fn per_element(&self, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let d = self.mean.len();
        if x.rank() == 0 || x.shape()[1..] != *self.mean.shape() {
            return Err(Error::Shape(format!(
                "oracle expects [B, {:?}] input, got {:?}",
                self.mean.shape(),
                x.shape()
            )));
        }
        let mu = self.mean.data();
        Tensor::new(
            x.shape().to_vec(),
            x.data().iter().enumerate().map(|(i, &v)| f(v, mu[i % d])).collect(),
        )
    }

    /// Score of the noisy marginal in rescaled coordinates `x̄ = x0 + σ·ε`:
    /// `(μ − x̄)/(v + σ²)`.
    pub fn score_ve(&self, xbar: &Tensor, sigma: f64) -> Result<Tensor> {
        let denom = (self.var + sigma * sigma).max(DENOM_FLOOR);
        self.per_element(xbar, |x, m| (m - x) / denom)
    }

    /// Posterior mean `E[x0 | x_t]` under the variance-preserving path.
    pub fn posterior_mean(&self, x_t: &Tensor, t: usize, sched: &VpSchedule) -> Result<Tensor> {
        let a = sched.alpha_bar()[t];
        let denom = (a * self.var + 1.0 - a).max(DENOM_FLOOR);
        let gain = a.sqrt() * self.var / denom;
        self.per_element(x_t, |x, m| m + gain * (x - a.sqrt() * m))
    }
}

impl EpsModel for GaussianOracle {
    /// `E[ε | x_t] = sqrt(1 − ᾱ)(x_t − sqrt(ᾱ)μ)/(ᾱv + 1 − ᾱ)`.
    fn predict_eps(&self, x_t: &Tensor, t: usize, sched: &VpSchedule) -> Result<Tensor> {
        if t >= sched.steps() {
            return Err(Error::Domain(format!("step {} outside 0..{}", t, sched.steps())));
        }
        let a = sched.alpha_bar()[t];
        let denom = (a * self.var + 1.0 - a).max(DENOM_FLOOR);
        let c = (1.0 - a).sqrt() / denom;
        self.per_element(x_t, |x, m| c * (x - a.sqrt() * m))
    }
}

impl VelocityModel for GaussianOracle {
    /// `E[x1 − x0 | x_t] = μ + (t·v − (1 − t))/(t²v + (1 − t)²)·(x − tμ)`.
    fn predict_velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let denom = (t * t * self.var + (1.0 - t) * (1.0 - t)).max(DENOM_FLOOR);
        let c = (t * self.var - (1.0 - t)) / denom;
        self.per_element(x, |v, m| m + c * (v - t * m))
    }
}
