use rand::SeedableRng;

use super::*;
use crate::oracle::GaussianOracle;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Recovers the noise endpoint from a known data batch and returns the
/// exact conditional velocity.
struct KnowsX1<'a>(&'a Tensor);

impl VelocityModel for KnowsX1<'_> {
    fn predict_velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        x.zip_map(self.0, |xt, x1| x1 - (xt - t * x1) / (1.0 - t))
    }
}

struct Constant(f64);

impl VelocityModel for Constant {
    fn predict_velocity(&self, x: &Tensor, _: f64) -> Result<Tensor> {
        Ok(Tensor::full(x.shape(), self.0))
    }
}

#[test]
fn path_examples() {
    let x1 = Tensor::vector(vec![3.0, -2.0]);
    let x0 = Tensor::vector(vec![1.0, 4.0]);
    assert_eq!(path_point(&x1, &x0, 0.0).unwrap(), x0);
    assert_eq!(path_point(&x1, &x0, 1.0).unwrap(), x1);
    assert_eq!(path_point(&x1, &x0, 0.5).unwrap().data(), &[2.0, 1.0]);
    assert!(matches!(path_point(&x1, &x0, 1.5), Err(Error::Domain(_))));
    assert!(path_point(&x1, &Tensor::zeros(&[3]), 0.5).is_err());
    for t in [0.0, 0.3, 1.0] {
        assert_eq!(path_beta(t) + path_gamma(t), 1.0);
    }
}

#[test]
fn velocity_identities() {
    let mut r = rng(1);
    let x1 = normal_tensor(&[4, 3], &mut r);
    let x0 = normal_tensor(&[4, 3], &mut r);
    let v = velocity_target(&x1, &x0).unwrap();
    assert_eq!(velocity_target(&x1, &x1).unwrap(), Tensor::zeros(&[4, 3]));
    for t in [0.0, 0.25, 0.9] {
        let xt = path_point(&x1, &x0, t).unwrap();
        let back = xt.zip_map(&v, |a, b| a + (1.0 - t) * b).unwrap();
        assert!(back.max_abs_diff(&x1) < 1e-12);
    }
    let v = velocity_target(&Tensor::vector(vec![3.0]), &Tensor::vector(vec![1.0])).unwrap();
    assert_eq!(v.data(), &[2.0]);
}

#[test]
fn flow_loss_oracles() {
    let x1 = normal_tensor(&[32, 2], &mut rng(2));
    assert!(flow_loss(&KnowsX1(&x1), &x1, &mut rng(3)).unwrap() < 1e-12);

    // Zero predictor: the loss is the mean square of x1 − x0 for the same draws.
    let mut total = 0.0;
    let mut expected = 0.0;
    for k in 0..50 {
        total += flow_loss(&Constant(0.0), &x1, &mut rng(100 + k)).unwrap();
        let (_, x0) = draw_time_and_noise(x1.shape(), &mut rng(100 + k));
        let v = velocity_target(&x1, &x0).unwrap();
        expected += v.data().iter().map(|a| a * a).sum::<f64>() / v.len() as f64;
    }
    assert!((total - expected).abs() < 1e-9);
}

#[test]
fn constant_field_is_integrated_exactly() {
    let start = normal_tensor(&[5, 2], &mut rng(4));
    for n in [1, 3, 200] {
        for solver in [Solver::Euler, Solver::Heun] {
            let x = ode_sample(&Constant(0.75), n, start.clone(), solver).unwrap();
            assert!(x.max_abs_diff(&start.map(|v| v + 0.75)) < 1e-12);
        }
    }
    assert!(ode_sample(&Constant(0.0), 0, start, Solver::Euler).is_err());
}

#[test]
fn point_oracle_converges_to_point() {
    let oracle = GaussianOracle::new(Tensor::vector(vec![0.5, -0.5]), 0.0).unwrap();
    let n = 200;
    let start = normal_tensor(&[10, 2], &mut rng(5));
    // Stop one step short of t = 1.
    let x = ode_sample(&Truncated(&oracle, n - 1, n), n - 1, start, Solver::Euler).unwrap();
    for row in x.data().chunks(2) {
        let d = ((row[0] - 0.5).powi(2) + (row[1] + 0.5).powi(2)).sqrt();
        assert!(d < 0.05, "distance {}", d);
    }
}

/// Runs an inner field on the time grid of `n` steps while integrating
/// only `m` of them.
struct Truncated<'a>(&'a GaussianOracle, usize, usize);

impl VelocityModel for Truncated<'_> {
    fn predict_velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let scale = self.1 as f64 / self.2 as f64;
        // Time and velocity rescaled so m steps of 1/m equal m steps of 1/n.
        Ok(self.0.predict_velocity(x, t * scale)?.map(|v| v * scale))
    }
}

#[test]
fn gaussian_oracle_sampling_moments() {
    let mu = [1.0, -2.0];
    let oracle = GaussianOracle::new(Tensor::vector(mu.to_vec()), 0.5).unwrap();
    let n = 10_000;
    let x = ode_sample_batch(&oracle, 200, n, &[2], Solver::Euler, &mut rng(6)).unwrap();
    for d in 0..2 {
        let col: Vec<f64> = x.data().iter().skip(d).step_by(2).copied().collect();
        let m = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|c| (c - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((m - mu[d]).abs() < 0.03);
        assert!((var - 0.5).abs() / 0.5 < 0.05);
    }
}

#[test]
fn euler_error_halves_with_step_doubling() {
    let oracle = GaussianOracle::new(Tensor::vector(vec![1.0, -2.0]), 0.5).unwrap();
    let start = normal_tensor(&[200, 2], &mut rng(7));
    let fine = ode_sample(&oracle, 3200, start.clone(), Solver::Heun).unwrap();
    let e100 = ode_sample(&oracle, 100, start.clone(), Solver::Euler).unwrap().max_abs_diff(&fine);
    let e200 = ode_sample(&oracle, 200, start, Solver::Euler).unwrap().max_abs_diff(&fine);
    let ratio = e100 / e200;
    assert!((1.6..2.4).contains(&ratio), "ratio {}", ratio);
}

#[test]
fn solver_names_parse() {
    assert_eq!("heun".parse::<Solver>().unwrap(), Solver::Heun);
    assert!("rk4".parse::<Solver>().is_err());
}
