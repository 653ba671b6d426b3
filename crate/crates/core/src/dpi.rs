//! Deep parameter interpolation.
//!
//! A network `f(θ, x)` becomes scalar-conditioned by keeping two parameter
//! sets and evaluating `f((1 − λ(s))·θ⁰ + λ(s)·θ¹, x)`. The architecture of
//! `f` is untouched; only the parameter tensors it receives change with `s`.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::interp::MonotoneInterpolant;
use crate::params::{ParamSpec, Scope};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    /// θ⁰ and θ¹ drawn independently from the same distribution.
    Independent,
    /// θ¹ copied from θ⁰.
    Clone,
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitScheme::Independent => "independent",
            InitScheme::Clone => "clone",
        })
    }
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(InitScheme::Independent),
            "clone" => Ok(InitScheme::Clone),
            other => Err(Error::Config(format!("unknown init scheme '{}'", other))),
        }
    }
}

/// Two parameter sets for one base network plus the interpolant that blends
/// them.
///
/// `theta0` holds a tensor for every manifest entry; for entries outside the
/// scope it is the single shared copy. `theta1` holds the in-scope entries
/// only, in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct DualParams {
    manifest: Vec<ParamSpec>,
    scope: Scope,
    theta0: Vec<Tensor>,
    theta1: Vec<Tensor>,
    interp: MonotoneInterpolant,
}

/// Tape handles for a bound [`DualParams`].
#[derive(Clone, Debug)]
pub struct DualVars {
    pub theta0: Vec<Var>,
    pub theta1: Vec<Var>,
    pub phi: Option<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Overhead {
    /// Learnable scalars of the single-parameter-set network.
    pub base_params: usize,
    /// Learnable scalars including both sets and the logits.
    pub param_count: usize,
    /// In-scope scalars that are blended.
    pub blended_params: usize,
    /// Floating-point operations for one blend: two multiplies and one add
    /// per in-scope scalar.
    pub blend_flops: usize,
}

impl DualParams {
    pub fn new(
        manifest: Vec<ParamSpec>,
        scope: Scope,
        theta0: Vec<Tensor>,
        theta1: Vec<Tensor>,
        interp: MonotoneInterpolant,
    ) -> Result<Self> {
        if theta0.len() != manifest.len() {
            return Err(Error::Shape(format!(
                "θ⁰ has {} tensors for a manifest of {}",
                theta0.len(),
                manifest.len()
            )));
        }
        let in_scope: Vec<&ParamSpec> = manifest.iter().filter(|s| scope.contains(s.kind)).collect();
        if theta1.len() != in_scope.len() {
            return Err(Error::Shape(format!(
                "θ¹ has {} tensors for {} in-scope entries",
                theta1.len(),
                in_scope.len()
            )));
        }
        for (spec, t) in manifest.iter().zip(&theta0) {
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Shape(format!("θ⁰ '{}' has shape {:?}", spec.name, t.shape())));
            }
        }
        for (spec, t) in in_scope.iter().zip(&theta1) {
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Shape(format!("θ¹ '{}' has shape {:?}", spec.name, t.shape())));
            }
        }
        Ok(Self {
            manifest,
            scope,
            theta0,
            theta1,
            interp,
        })
    }

    /// Builds both parameter sets from the manifest's initializers. With
    /// `Independent`, θ⁰ uses `seed` and θ¹ a derived seed.
    pub fn init(
        manifest: Vec<ParamSpec>,
        scope: Scope,
        interp: MonotoneInterpolant,
        scheme: InitScheme,
        seed: u64,
    ) -> Result<Self> {
        let mut rng0 = ChaCha8Rng::seed_from_u64(seed);
        let theta0: Vec<Tensor> = manifest.iter().map(|s| s.initialize(&mut rng0)).collect();
        let theta1 = match scheme {
            InitScheme::Clone => manifest
                .iter()
                .zip(&theta0)
                .filter(|(s, _)| scope.contains(s.kind))
                .map(|(_, t)| t.clone())
                .collect(),
            InitScheme::Independent => {
                let mut rng1 = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
                manifest
                    .iter()
                    .map(|s| (s, s.initialize(&mut rng1)))
                    .filter(|(s, _)| scope.contains(s.kind))
                    .map(|(_, t)| t)
                    .collect()
            }
        };
        Self::new(manifest, scope, theta0, theta1, interp)
    }

    pub fn manifest(&self) -> &[ParamSpec] {
        &self.manifest
    }

    pub fn scope(&self) -> Scope {
        self.scope
    }

    pub fn interp(&self) -> &MonotoneInterpolant {
        &self.interp
    }

    pub fn interp_mut(&mut self) -> &mut MonotoneInterpolant {
        &mut self.interp
    }

    pub fn theta0(&self) -> &[Tensor] {
        &self.theta0
    }

    pub fn theta1(&self) -> &[Tensor] {
        &self.theta1
    }

    pub fn in_scope(&self, index: usize) -> bool {
        self.scope.contains(self.manifest[index].kind)
    }

    /// θ¹ expanded to the full manifest: in-scope entries from θ¹, the rest
    /// shared with θ⁰.
    pub fn theta1_full(&self) -> Vec<Tensor> {
        let mut it = self.theta1.iter();
        self.theta0
            .iter()
            .enumerate()
            .map(|(i, t0)| {
                if self.in_scope(i) {
                    it.next().expect("θ¹ aligned with scope").clone()
                } else {
                    t0.clone()
                }
            })
            .collect()
    }

    /// Flat list of every learnable tensor: all θ⁰ (shared included), then
    /// the in-scope θ¹, then the logits when λ is learnable.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (spec, t) in self.manifest.iter().zip(&self.theta0) {
            let name = if self.scope.contains(spec.kind) {
                format!("theta0/{}", spec.name)
            } else {
                spec.name.clone()
            };
            out.push((name, t));
        }
        let in_scope = self.manifest.iter().filter(|s| self.scope.contains(s.kind));
        for (spec, t) in in_scope.zip(&self.theta1) {
            out.push((format!("theta1/{}", spec.name), t));
        }
        if self.interp.mode().is_learnable() {
            out.push(("phi".to_string(), self.interp.logits()));
        }
        out
    }

    /// Mutable access in the same order as [`DualParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.theta0.iter_mut().chain(self.theta1.iter_mut()).collect();
        if self.interp.mode().is_learnable() {
            out.push(self.interp.logits_mut());
        }
        out
    }

    /// Registers every learnable tensor on the tape, tracked or not.
    pub fn bind(&self, tape: &mut Tape, tracked: bool) -> DualVars {
        let mut reg = |t: &Tensor| if tracked { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        let theta0 = self.theta0.iter().map(&mut reg).collect();
        let theta1 = self.theta1.iter().map(&mut reg).collect();
        let phi = self
            .interp
            .mode()
            .is_learnable()
            .then(|| reg(self.interp.logits()));
        DualVars { theta0, theta1, phi }
    }

    /// The blended parameter view θ(s) in manifest order.
    pub fn blend_parameters(&self, tape: &mut Tape, vars: &DualVars, s: f64) -> Result<Vec<Var>> {
        let lambda = self.interp.eval_on_tape(tape, vars.phi, s)?;
        let mut next1 = vars.theta1.iter();
        let mut out = Vec::with_capacity(self.manifest.len());
        for (i, &v0) in vars.theta0.iter().enumerate() {
            if self.in_scope(i) {
                let v1 = *next1.next().expect("θ¹ aligned with scope");
                out.push(tape.blend(lambda, v0, v1)?);
            } else {
                out.push(v0);
            }
        }
        Ok(out)
    }

    /// Runs `base` with the blended parameters for scalar `s`.
    pub fn forward<F>(&self, tape: &mut Tape, vars: &DualVars, s: f64, base: F) -> Result<Var>
    where
        F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
    {
        let params = self.blend_parameters(tape, vars, s)?;
        base(tape, &params)
    }

    /// Parameter and blend-cost accounting against the single-set network.
    pub fn overhead(&self) -> Overhead {
        count_overhead(&self.manifest, self.scope, self.interp.logit_len())
    }
}

/// Parameter count and per-blend cost of interpolating `scope` within
/// `manifest`, with `phi_len` logits. The logits are only counted when
/// something is blended.
pub fn count_overhead(manifest: &[ParamSpec], scope: Scope, phi_len: usize) -> Overhead {
    let base: usize = manifest.iter().map(ParamSpec::numel).sum();
    let blended: usize = manifest
        .iter()
        .filter(|s| scope.contains(s.kind))
        .map(ParamSpec::numel)
        .sum();
    let phi = if blended > 0 { phi_len } else { 0 };
    Overhead {
        base_params: base,
        param_count: base + blended + phi,
        blended_params: blended,
        blend_flops: 3 * blended,
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::autodiff::{finite_difference_gradient, relative_error};
    use crate::interp::LambdaMode;
    use crate::params::{Init, ParamKind};

    fn toy_manifest() -> Vec<ParamSpec> {
        vec![
            ParamSpec::new("w", &[2], ParamKind::LinearWeight, Init::FanInUniform(2)),
            ParamSpec::new("b", &[1], ParamKind::LinearBias, Init::Zeros),
        ]
    }

    /// `f(θ, x) = silu(w·x) + b`, a two-parameter network with a shared bias.
    fn toy_net(tape: &mut Tape, p: &[Var], x: &Tensor) -> Result<Var> {
        let xv = tape.constant(x.clone());
        let wx = tape.mul(p[0], xv)?;
        let dot = tape.sum(wx);
        let h = tape.silu(dot);
        let h = tape.reshape(h, &[1])?;
        let y = tape.add(h, p[1])?;
        Ok(tape.sum(y))
    }

    fn toy_dual(logits: Vec<f64>) -> DualParams {
        let mut interp = MonotoneInterpolant::new(LambdaMode::ExactEndpoint, logits.len() + 1, 0.0, 1.0).unwrap();
        interp.set_logits(Tensor::vector(logits)).unwrap();
        DualParams::new(
            toy_manifest(),
            Scope::WEIGHTS,
            vec![Tensor::vector(vec![0.3, -1.2]), Tensor::vector(vec![0.4])],
            vec![Tensor::vector(vec![1.1, 0.7])],
            interp,
        )
        .unwrap()
    }

    #[test]
    fn blend_examples() {
        let interp = MonotoneInterpolant::new(LambdaMode::ExactEndpoint, 3, 0.0, 1.0).unwrap();
        let manifest = vec![ParamSpec::new("w", &[2], ParamKind::LinearWeight, Init::Zeros)];
        let dual = DualParams::new(
            manifest,
            Scope::WEIGHTS,
            vec![Tensor::vector(vec![1.0, 2.0])],
            vec![Tensor::vector(vec![3.0, 6.0])],
            interp,
        )
        .unwrap();
        let mut tape = Tape::new();
        let vars = dual.bind(&mut tape, false);
        let mid = dual.blend_parameters(&mut tape, &vars, 0.5).unwrap();
        assert_eq!(tape.value(mid[0]).data(), &[2.0, 4.0]);
        let lo = dual.blend_parameters(&mut tape, &vars, 0.0).unwrap();
        assert_eq!(tape.value(lo[0]), &dual.theta0()[0]);
        let hi = dual.blend_parameters(&mut tape, &vars, 1.0).unwrap();
        assert_eq!(tape.value(hi[0]), &dual.theta1()[0]);
        assert!(matches!(dual.blend_parameters(&mut tape, &vars, 1.5), Err(Error::Domain(_))));
    }

    #[test]
    fn gradient_routing_matches_finite_differences() {
        let x = Tensor::vector(vec![0.8, -0.5]);
        let dual = toy_dual(vec![0.2, -0.4, 0.9]);
        let s = 0.45;
        let mut tape = Tape::new();
        let vars = dual.bind(&mut tape, true);
        let out = dual.forward(&mut tape, &vars, s, |t, p| toy_net(t, p, &x)).unwrap();
        let grads = tape.backward(out).unwrap();

        let eval = |d: &DualParams| {
            let mut t = Tape::new();
            let v = d.bind(&mut t, false);
            let o = d.forward(&mut t, &v, s, |t, p| toy_net(t, p, &x)).unwrap();
            t.value(o).item()
        };
        let fd0 = finite_difference_gradient(
            |w| {
                let mut d = dual.clone();
                d.theta0[0] = w.clone();
                eval(&d)
            },
            &dual.theta0()[0],
            1e-6,
        );
        let fd1 = finite_difference_gradient(
            |w| {
                let mut d = dual.clone();
                d.theta1[0] = w.clone();
                eval(&d)
            },
            &dual.theta1()[0],
            1e-6,
        );
        let fdphi = finite_difference_gradient(
            |p| {
                let mut d = dual.clone();
                d.interp.set_logits(p.clone()).unwrap();
                eval(&d)
            },
            dual.interp().logits(),
            1e-6,
        );
        assert!(relative_error(grads.get(vars.theta0[0]).unwrap(), &fd0, 1e-8) < 1e-6);
        assert!(relative_error(grads.get(vars.theta1[0]).unwrap(), &fd1, 1e-8) < 1e-6);
        assert!(relative_error(grads.get(vars.phi.unwrap()).unwrap(), &fdphi, 1e-8) < 1e-6);
    }

    #[test]
    fn gradients_split_by_lambda() {
        // ∂L/∂θ⁰ + ∂L/∂θ¹ equals the gradient of the blended tensor.
        let x = Tensor::vector(vec![0.8, -0.5]);
        let dual = toy_dual(vec![0.1, 0.5, -0.3]);
        for s in [0.0, 0.2, 0.61, 1.0] {
            let mut tape = Tape::new();
            let vars = dual.bind(&mut tape, true);
            let out = dual.forward(&mut tape, &vars, s, |t, p| toy_net(t, p, &x)).unwrap();
            let g = tape.backward(out).unwrap();
            let g0 = g.get(vars.theta0[0]).unwrap();
            let g1 = g.get(vars.theta1[0]).unwrap();

            let lam = dual.interp().eval(s).unwrap();
            let blended = dual.theta0()[0]
                .zip_map(&dual.theta1()[0], |a, b| (1.0 - lam) * a + lam * b)
                .unwrap();
            let mut t = Tape::new();
            let w = t.leaf(blended);
            let b = t.constant(dual.theta0()[1].clone());
            let o = toy_net(&mut t, &[w, b], &x).unwrap();
            let gb = t.backward(o).unwrap();
            let sum = g0.zip_map(g1, |a, b| a + b).unwrap();
            assert!(sum.max_abs_diff(gb.get(w).unwrap()) < 1e-10);
            // Split proportions follow (1 − λ) and λ.
            for k in 0..2 {
                let gw = gb.get(w).unwrap().data()[k];
                assert!((g0.data()[k] - (1.0 - lam) * gw).abs() < 1e-12);
                assert!((g1.data()[k] - lam * gw).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn init_schemes() {
        let interp = MonotoneInterpolant::new(LambdaMode::ExactEndpoint, 4, 0.0, 1.0).unwrap();
        let cloned = DualParams::init(toy_manifest(), Scope::ALL, interp.clone(), InitScheme::Clone, 3).unwrap();
        assert_eq!(cloned.theta1_full(), cloned.theta0().to_vec());

        let a = DualParams::init(toy_manifest(), Scope::ALL, interp.clone(), InitScheme::Independent, 3).unwrap();
        let b = DualParams::init(toy_manifest(), Scope::ALL, interp, InitScheme::Independent, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.theta0()[0], a.theta1()[0]);
        for (t0, t1) in a.theta0().iter().zip(a.theta1()) {
            assert_eq!(t0.shape(), t1.shape());
        }
    }

    #[test]
    fn overhead_examples() {
        let manifest = vec![ParamSpec::new("w", &[10, 10], ParamKind::ConvWeight, Init::Zeros)];
        let o = count_overhead(&manifest, Scope::ALL, 9);
        assert_eq!(o.param_count, 209);
        assert_eq!(o.blend_flops, 300);
        let o = count_overhead(&manifest, Scope::EMPTY, 9);
        assert_eq!(o.param_count, 100);
        assert_eq!(o.param_count, o.base_params);
    }

    #[test]
    fn shared_parameters_are_not_duplicated() {
        let dual = toy_dual(vec![0.0; 3]);
        let names: Vec<String> = dual.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["theta0/w", "b", "theta1/w", "phi"]);
    }

    #[test]
    fn equal_sets_make_output_independent_of_s() {
        let x = Tensor::vector(vec![0.8, -0.5]);
        let mut dual = toy_dual(vec![0.3, -0.1, 0.2]);
        dual.theta1[0] = dual.theta0[0].clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let outs: Vec<f64> = (0..10)
            .map(|_| {
                let s = rng.gen_range(0.0..=1.0);
                let mut t = Tape::new();
                let v = dual.bind(&mut t, false);
                let o = dual.forward(&mut t, &v, s, |t, p| toy_net(t, p, &x)).unwrap();
                t.value(o).item()
            })
            .collect();
        assert!(outs.iter().all(|o| (o - outs[0]).abs() < 1e-12));
    }
}
