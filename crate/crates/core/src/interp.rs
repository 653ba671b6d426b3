//! Learnable monotone interpolation λ(s) ∈ [0, 1].
//!
//! λ is a normalized cumulative distribution over a grid of `S` scalar
//! values: logits φ go through a softmax and a prefix sum, so every
//! increment is positive and the curve can only rise. The scalar domain
//! `[s_min, s_max]` maps affinely onto grid indices `1..=S`; scalars between
//! grid points are interpolated linearly.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::autodiff::{softmax_values, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LambdaMode {
    /// `S − 1` logits, `λ(s_i) = Σ_{j<i} p_j`: λ is exactly 0 at `s_min` and
    /// exactly 1 at `s_max`.
    ExactEndpoint,
    /// `S` logits, `λ(s_i) = Σ_{j≤i} p_j`: the first grid value is `p_1 > 0`.
    PaperCumsum,
    /// `λ(s) = (s − s_min)/(s_max − s_min)` with no learnable parameters.
    FixedLinear,
}

impl LambdaMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LambdaMode::ExactEndpoint => "exact_endpoint",
            LambdaMode::PaperCumsum => "paper_cumsum",
            LambdaMode::FixedLinear => "fixed_linear",
        }
    }

    pub fn is_learnable(self) -> bool {
        self != LambdaMode::FixedLinear
    }
}

impl fmt::Display for LambdaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LambdaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact_endpoint" | "learnable" => Ok(LambdaMode::ExactEndpoint),
            "paper_cumsum" => Ok(LambdaMode::PaperCumsum),
            "fixed_linear" | "linear" => Ok(LambdaMode::FixedLinear),
            other => Err(Error::Config(format!("unknown lambda mode '{}'", other))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MonotoneInterpolant {
    mode: LambdaMode,
    grid_size: usize,
    s_min: f64,
    s_max: f64,
    logits: Tensor,
}

/// Position of a scalar on the grid: lower 1-based index plus the fraction
/// toward the next index.
#[derive(Clone, Copy, Debug, PartialEq)]
struct GridPos {
    index: usize,
    frac: f64,
}

impl MonotoneInterpolant {
    /// Zero logits, so λ starts as the uniform ramp.
    pub fn new(mode: LambdaMode, grid_size: usize, s_min: f64, s_max: f64) -> Result<Self> {
        if grid_size < 2 {
            return Err(Error::Config(format!("grid size must be at least 2, got {}", grid_size)));
        }
        if !(s_min.is_finite() && s_max.is_finite() && s_min < s_max) {
            return Err(Error::Config(format!("invalid scalar domain [{}, {}]", s_min, s_max)));
        }
        let len = match mode {
            LambdaMode::ExactEndpoint => grid_size - 1,
            LambdaMode::PaperCumsum => grid_size,
            LambdaMode::FixedLinear => 0,
        };
        Ok(Self {
            mode,
            grid_size,
            s_min,
            s_max,
            logits: Tensor::zeros(&[len]),
        })
    }

    pub fn mode(&self) -> LambdaMode {
        self.mode
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.s_min, self.s_max)
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn logit_len(&self) -> usize {
        self.logits.len()
    }

    pub(crate) fn logits_mut(&mut self) -> &mut Tensor {
        &mut self.logits
    }

    pub fn set_logits(&mut self, logits: Tensor) -> Result<()> {
        if logits.shape() != self.logits.shape() {
            return Err(Error::Shape(format!(
                "logits must have shape {:?}, got {:?}",
                self.logits.shape(),
                logits.shape()
            )));
        }
        self.logits = logits;
        Ok(())
    }

    /// The scalar value at 1-based grid index `i`.
    pub fn grid_scalar(&self, i: usize) -> f64 {
        let frac = (i - 1) as f64 / (self.grid_size - 1) as f64;
        if i == self.grid_size {
            self.s_max
        } else {
            self.s_min + frac * (self.s_max - self.s_min)
        }
    }

    fn position(&self, s: f64) -> Result<GridPos> {
        if !(s >= self.s_min && s <= self.s_max) {
            return Err(Error::Domain(format!(
                "scalar {} outside [{}, {}]",
                s, self.s_min, self.s_max
            )));
        }
        let u = 1.0 + (self.grid_size - 1) as f64 * (s - self.s_min) / (self.s_max - self.s_min);
        let index = (u.floor() as usize).clamp(1, self.grid_size);
        let frac = if index == self.grid_size { 0.0 } else { u - index as f64 };
        Ok(GridPos { index, frac })
    }

    fn linear(&self, s: f64) -> f64 {
        (s - self.s_min) / (self.s_max - self.s_min)
    }

    /// λ at every grid index `1..=S`.
    pub fn grid_lambdas(&self) -> Vec<f64> {
        match self.mode {
            LambdaMode::FixedLinear => (1..=self.grid_size)
                .map(|i| self.linear(self.grid_scalar(i)))
                .collect(),
            LambdaMode::ExactEndpoint | LambdaMode::PaperCumsum => {
                let cum = normalized_cumsum(&self.logits);
                if self.mode == LambdaMode::ExactEndpoint {
                    std::iter::once(0.0).chain(cum).collect()
                } else {
                    cum
                }
            }
        }
    }

    /// λ(s) without recording anything.
    pub fn eval(&self, s: f64) -> Result<f64> {
        let pos = self.position(s)?;
        if self.mode == LambdaMode::FixedLinear {
            return Ok(self.linear(s));
        }
        let grid = self.grid_lambdas();
        let lo = grid[pos.index - 1];
        if pos.frac == 0.0 {
            return Ok(lo);
        }
        let hi = grid[pos.index];
        Ok((lo + pos.frac * (hi - lo)).min(hi))
    }

    /// λ(s) recorded on `tape` as a scalar node. `phi` must be the tape node
    /// holding this interpolant's logits; it is ignored in fixed-linear mode.
    pub fn eval_on_tape(&self, tape: &mut Tape, phi: Option<Var>, s: f64) -> Result<Var> {
        let pos = self.position(s)?;
        if self.mode == LambdaMode::FixedLinear {
            return Ok(tape.constant(Tensor::scalar(self.linear(s))));
        }
        let phi = phi.ok_or_else(|| Error::Usage("learnable λ needs its logits on the tape".into()))?;
        if tape.shape(phi) != self.logits.shape() {
            return Err(Error::Shape(format!(
                "logit node has shape {:?}, expected {:?}",
                tape.shape(phi),
                self.logits.shape()
            )));
        }
        let p = tape.softmax(phi);
        let c = tape.cumsum(p);
        let total = tape.select(c, self.logits.len() - 1)?;
        let at = |tape: &mut Tape, i: usize| -> Result<Var> {
            // 1-based grid index to the prefix-sum entry that holds λ_i.
            let slot = match self.mode {
                LambdaMode::ExactEndpoint if i == 1 => {
                    return Ok(tape.constant(Tensor::scalar(0.0)));
                }
                LambdaMode::ExactEndpoint => i - 2,
                _ => i - 1,
            };
            let v = tape.select(c, slot)?;
            tape.div_var(v, total)
        };
        let lo = at(tape, pos.index)?;
        if pos.frac == 0.0 {
            return Ok(lo);
        }
        let hi = at(tape, pos.index + 1)?;
        let d = tape.sub(hi, lo)?;
        let step = tape.scale(d, pos.frac);
        let out = tape.add(lo, step)?;
        if tape.value(out).item() > tape.value(hi).item() {
            return Ok(hi);
        }
        Ok(out)
    }

    /// Analytic gradient of λ at 1-based grid index `i` with respect to the
    /// logits: `p_j·(𝟙[j < i] − λ_i)`, or `𝟙[j ≤ i]` in paper mode.
    pub fn grad_phi(&self, i: usize) -> Result<Tensor> {
        if self.mode == LambdaMode::FixedLinear {
            return Err(Error::Usage("fixed-linear λ has no learnable parameters".into()));
        }
        if i == 0 || i > self.grid_size {
            return Err(Error::Domain(format!("grid index {} outside 1..={}", i, self.grid_size)));
        }
        let p = softmax_values(&self.logits);
        let lambda = self.grid_lambdas()[i - 1];
        let strict = self.mode == LambdaMode::ExactEndpoint;
        Ok(Tensor::from_fn(self.logits.shape(), |j0| {
            let j = j0 + 1;
            let inside = if strict { j < i } else { j <= i };
            p.data()[j0] * (if inside { 1.0 } else { 0.0 } - lambda)
        }))
    }

    /// `(grid_index, s, lambda)` rows for every grid point.
    pub fn table(&self) -> Vec<(usize, f64, f64)> {
        self.grid_lambdas()
            .into_iter()
            .enumerate()
            .map(|(k, l)| (k + 1, self.grid_scalar(k + 1), l))
            .collect()
    }

    pub fn write_table_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "grid_index,s,lambda")?;
        for (i, s, l) in self.table() {
            writeln!(out, "{},{},{}", i, s, l)?;
        }
        Ok(())
    }

    /// Mean absolute deviation of the grid λ from the linear ramp.
    pub fn l1_from_linear(&self) -> f64 {
        let n = self.grid_size as f64;
        self.table()
            .iter()
            .map(|&(_, s, l)| (l - self.linear(s)).abs())
            .sum::<f64>()
            / n
    }
}

/// Prefix sums of `softmax(logits)` divided by their final entry, so the
/// last value is exactly 1.
fn normalized_cumsum(logits: &Tensor) -> Vec<f64> {
    let p = softmax_values(logits);
    let mut acc = 0.0;
    let cum: Vec<f64> = p
        .data()
        .iter()
        .map(|v| {
            acc += v;
            acc
        })
        .collect();
    let total = *cum.last().expect("non-empty logits");
    cum.into_iter().map(|c| c / total).collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn with_logits(mode: LambdaMode, s: usize, logits: Vec<f64>) -> MonotoneInterpolant {
        let mut m = MonotoneInterpolant::new(mode, s, 0.0, 1.0).unwrap();
        m.set_logits(Tensor::vector(logits)).unwrap();
        m
    }

    #[test]
    fn uniform_logits_give_uniform_ramps() {
        let m = MonotoneInterpolant::new(LambdaMode::ExactEndpoint, 5, 0.0, 1.0).unwrap();
        assert_eq!(m.grid_lambdas(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        let m = MonotoneInterpolant::new(LambdaMode::PaperCumsum, 4, 0.0, 1.0).unwrap();
        assert_eq!(m.grid_lambdas(), vec![0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn fixed_linear_is_identity_on_unit_domain() {
        let m = MonotoneInterpolant::new(LambdaMode::FixedLinear, 1000, 0.0, 1.0).unwrap();
        assert_eq!(m.eval(0.3).unwrap(), 0.3);
        assert_eq!(m.logit_len(), 0);
        assert!(matches!(m.grad_phi(3), Err(Error::Usage(_))));
    }

    #[test]
    fn out_of_domain_is_rejected() {
        let m = MonotoneInterpolant::new(LambdaMode::ExactEndpoint, 10, 0.0, 9.0).unwrap();
        assert!(matches!(m.eval(-0.1), Err(Error::Domain(_))));
        assert!(matches!(m.eval(9.5), Err(Error::Domain(_))));
        assert!(matches!(m.eval(f64::NAN), Err(Error::Domain(_))));
    }

    #[test]
    fn analytic_gradient_examples() {
        let m = MonotoneInterpolant::new(LambdaMode::ExactEndpoint, 3, 0.0, 1.0).unwrap();
        assert_eq!(m.grad_phi(1).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(m.grad_phi(2).unwrap().data(), &[0.25, -0.25]);
    }

    #[test]
    fn analytic_gradient_matches_autodiff() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for mode in [LambdaMode::ExactEndpoint, LambdaMode::PaperCumsum] {
            let s = 12;
            let mut m = MonotoneInterpolant::new(mode, s, 0.0, 11.0).unwrap();
            let len = m.logit_len();
            m.set_logits(Tensor::from_fn(&[len], |_| rng.gen_range(-2.0..2.0)))
                .unwrap();
            for i in 1..=s {
                let mut tape = Tape::new();
                let phi = tape.leaf(m.logits().clone());
                let lam = m.eval_on_tape(&mut tape, Some(phi), m.grid_scalar(i)).unwrap();
                let g = tape.backward(lam).unwrap();
                let diff = g.get(phi).unwrap().max_abs_diff(&m.grad_phi(i).unwrap());
                assert!(diff < 1e-8, "mode {mode} index {i}: {diff}");
            }
        }
    }

    #[test]
    fn tape_and_plain_evaluation_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = with_logits(
            LambdaMode::ExactEndpoint,
            9,
            (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        );
        for k in 0..=40 {
            let s = k as f64 / 40.0;
            let mut tape = Tape::new();
            let phi = tape.constant(m.logits().clone());
            let v = m.eval_on_tape(&mut tape, Some(phi), s).unwrap();
            assert_eq!(tape.value(v).item(), m.eval(s).unwrap());
        }
    }

    #[test]
    fn table_csv_has_header_and_every_grid_point() {
        let m = MonotoneInterpolant::new(LambdaMode::ExactEndpoint, 4, 0.0, 3.0).unwrap();
        let mut buf = Vec::new();
        m.write_table_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "grid_index,s,lambda");
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[4], "4,3,1");
    }

    #[test]
    fn linear_mode_table_is_the_ramp() {
        let m = MonotoneInterpolant::new(LambdaMode::FixedLinear, 11, 0.0, 1.0).unwrap();
        for (_, s, l) in m.table() {
            assert_eq!(s, l);
        }
        assert_eq!(m.l1_from_linear(), 0.0);
    }

    proptest! {
        #[test]
        fn monotone_bounded_with_exact_endpoints(
            logits in prop::collection::vec(-6.0f64..6.0, 1..60),
            paper in any::<bool>(),
        ) {
            let mode = if paper { LambdaMode::PaperCumsum } else { LambdaMode::ExactEndpoint };
            let s = if paper { logits.len().max(2) } else { logits.len() + 1 };
            let mut logits = logits;
            logits.resize(if paper { s } else { s - 1 }, 0.0);
            let m = with_logits(mode, s, logits);
            let grid = m.grid_lambdas();
            prop_assert!(grid.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(grid.iter().all(|&l| (0.0..=1.0).contains(&l)));
            prop_assert_eq!(*grid.last().unwrap(), 1.0);
            if !paper {
                prop_assert_eq!(grid[0], 0.0);
                prop_assert_eq!(m.eval(0.0).unwrap(), 0.0);
                prop_assert_eq!(m.eval(1.0).unwrap(), 1.0);
            }
        }

        #[test]
        fn translation_invariant(logits in prop::collection::vec(-3.0f64..3.0, 4), c in -20.0f64..20.0) {
            let a = with_logits(LambdaMode::ExactEndpoint, 5, logits.clone());
            let b = with_logits(LambdaMode::ExactEndpoint, 5, logits.iter().map(|v| v + c).collect());
            for (x, y) in a.grid_lambdas().iter().zip(b.grid_lambdas()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn off_grid_evaluation_is_monotone_and_continuous(
            logits in prop::collection::vec(-3.0f64..3.0, 7),
            mut points in prop::collection::vec(0.0f64..=1.0, 2..40),
        ) {
            let m = with_logits(LambdaMode::ExactEndpoint, 8, logits);
            points.sort_by(f64::total_cmp);
            let vals: Vec<f64> = points.iter().map(|&s| m.eval(s).unwrap()).collect();
            prop_assert!(vals.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(vals.iter().all(|&l| (0.0..=1.0).contains(&l)));
            // Approaching a grid point from below lands on its value.
            for i in 2..=8 {
                let s = m.grid_scalar(i);
                let left = m.eval(s - 1e-12).unwrap();
                prop_assert!((left - m.eval(s).unwrap()).abs() < 1e-9);
            }
        }
    }
}
