use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

const H: f64 = 1e-6;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-2.0..2.0))
}

/// Evaluates `build` on the given inputs and returns the scalar result.
fn eval(build: &dyn Fn(&mut Tape, &[Var]) -> Var, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars);
    tape.value(out).item()
}

/// Largest relative error between reverse-mode and central-difference
/// gradients across every input.
fn grad_check(build: &dyn Fn(&mut Tape, &[Var]) -> Var, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let fd = finite_difference_gradient(
            |x| {
                let mut probe = inputs.to_vec();
                probe[k] = x.clone();
                eval(build, &probe)
            },
            input,
            H,
        );
        worst = worst.max(relative_error(grads.get(vars[k]).unwrap(), &fd, 1e-8));
    }
    worst
}

/// Reduces a tensor to a scalar with a fixed, non-uniform weighting so every
/// output element contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape, v: Var) -> Var {
    let w = Tensor::from_fn(tape.shape(v), |i| ((i as f64) * 0.731).sin() + 0.5);
    let wv = tape.constant(w);
    let p = tape.mul(v, wv).unwrap();
    tape.sum(p)
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = tape.constant(Tensor::vector(vec![3.0, 4.0]));
    let s = tape.add(a, b).unwrap();
    assert_eq!(tape.value(s).data(), &[4.0, 6.0]);

    let c = tape.constant(Tensor::vector(vec![2.0, 3.0]));
    let z = tape.scale(c, 0.0);
    assert_eq!(tape.value(z).data(), &[0.0, 0.0]);

    let d = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    assert!(matches!(tape.add(a, d), Err(Error::Shape(_))));
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = tape.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).shape(), &[2, 1]);
    assert_eq!(tape.value(c).data(), &[3.0, 7.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[3, 4], &mut rng);
    let eye = tape.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
    let xv = tape.constant(x.clone());
    let y = tape.matmul(eye, xv).unwrap();
    assert_eq!(tape.value(y), &x);

    assert!(matches!(tape.matmul(a, xv), Err(Error::Shape(_))));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = [random(&[3, 3], &mut rng), random(&[3, 3], &mut rng)];
    let build = |t: &mut Tape, v: &[Var]| {
        let m = t.matmul(v[0], v[1]).unwrap();
        t.sum(m)
    };
    assert!(grad_check(&build, &inputs) < 1e-6);
}

#[test]
fn conv2d_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 4, 4], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());

    let w0 = tape.constant(Tensor::zeros(&[3, 2, 3, 3]));
    let b0 = tape.constant(Tensor::vector(vec![0.5, -1.0, 2.0]));
    let y = tape.conv2d(xv, w0, b0).unwrap();
    assert_eq!(tape.value(y).shape(), &[3, 4, 4]);
    for (i, v) in tape.value(y).data().iter().enumerate() {
        assert_eq!(*v, [0.5, -1.0, 2.0][i / 16]);
    }

    // Delta kernel mapping channel c to channel c.
    let delta = Tensor::from_fn(&[2, 2, 3, 3], |i| {
        let (o, c, k) = (i / 18, (i / 9) % 2, i % 9);
        if o == c && k == 4 {
            1.0
        } else {
            0.0
        }
    });
    let wd = tape.constant(delta);
    let bz = tape.constant(Tensor::zeros(&[2]));
    let y = tape.conv2d(xv, wd, bz).unwrap();
    assert_eq!(tape.value(y), &x);

    let wbad = tape.constant(Tensor::zeros(&[2, 3, 3, 3]));
    assert!(matches!(tape.conv2d(xv, wbad, bz), Err(Error::Shape(_))));
}

#[test]
fn conv2d_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = [
        random(&[2, 4, 4], &mut rng),
        random(&[3, 2, 3, 3], &mut rng),
        random(&[3], &mut rng),
    ];
    let build = |t: &mut Tape, v: &[Var]| {
        let y = t.conv2d(v[0], v[1], v[2]).unwrap();
        weighted_sum(t, y)
    };
    assert!(grad_check(&build, &inputs) < 1e-6);
}

#[test]
fn activation_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![-1.0, 2.0]));
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
    let z = tape.constant(Tensor::scalar(0.0));
    let s = tape.silu(z);
    assert_eq!(tape.value(s).item(), 0.0);
}

#[test]
fn silu_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = [random(&[16], &mut rng)];
    let build = |t: &mut Tape, v: &[Var]| {
        let y = t.silu(v[0]);
        weighted_sum(t, y)
    };
    assert!(grad_check(&build, &inputs) < 1e-7);
}

#[test]
fn group_norm_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[4, 2, 2], 3.0));
    let ones = tape.constant(Tensor::ones(&[4]));
    let zeros = tape.constant(Tensor::zeros(&[4]));
    let y = tape.group_norm(x, 2, ones, zeros).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let xr = tape.constant(random(&[4, 3, 3], &mut rng));
    let c = tape.constant(Tensor::full(&[4], 0.7));
    let y = tape.group_norm(xr, 2, zeros, c).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.7));

    let y = tape.group_norm(xr, 2, ones, zeros).unwrap();
    for group in tape.value(y).data().chunks(18) {
        let mean = group.iter().sum::<f64>() / 18.0;
        assert!(mean.abs() < 1e-10);
    }

    assert!(matches!(tape.group_norm(xr, 3, ones, zeros), Err(Error::Shape(_))));
}

#[test]
fn group_norm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = [
        random(&[4, 3, 3], &mut rng),
        random(&[4], &mut rng),
        random(&[4], &mut rng),
    ];
    let build = |t: &mut Tape, v: &[Var]| {
        let y = t.group_norm(v[0], 2, v[1], v[2]).unwrap();
        weighted_sum(t, y)
    };
    assert!(grad_check(&build, &inputs) < 1e-6);
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0, 0.0]));
    let p = tape.softmax(x);
    assert_eq!(tape.value(p).data(), &[0.5, 0.5]);

    let big = tape.constant(Tensor::vector(vec![1000.0, 0.0]));
    let p = tape.softmax(big);
    let v = tape.value(p).data();
    assert!(v.iter().all(|x| x.is_finite()));
    assert!((v[0] - 1.0).abs() < 1e-15 && v[1] < 1e-300);
}

#[test]
fn softmax_jacobian_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let phi = random(&[6], &mut rng);
    let p = softmax_values(&phi);
    // Rows of diag(p) − p pᵀ against differentiated softmax components.
    for i in 0..6 {
        let mut tape = Tape::new();
        let x = tape.leaf(phi.clone());
        let s = tape.softmax(x);
        let pi = tape.select(s, i).unwrap();
        let g = tape.backward(pi).unwrap();
        let analytic =
            Tensor::from_fn(&[6], |j| if i == j { p.data()[i] } else { 0.0 } - p.data()[i] * p.data()[j]);
        let fd = finite_difference_gradient(|x| softmax_values(x).data()[i], &phi, H);
        assert!(relative_error(g.get(x).unwrap(), &fd, 1e-8) < 1e-7);
        assert!(relative_error(&analytic, &fd, 1e-8) < 1e-7);
    }
}

#[test]
fn cumsum_examples_and_adjoint() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let c = tape.cumsum(x);
    assert_eq!(tape.value(c).data(), &[1.0, 3.0, 6.0]);
    let z = tape.constant(Tensor::zeros(&[4]));
    let c = tape.cumsum(z);
    assert_eq!(tape.value(c).data(), &[0.0; 4]);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inputs = [random(&[7], &mut rng)];
    let build = |t: &mut Tape, v: &[Var]| {
        let y = t.cumsum(v[0]);
        weighted_sum(t, y)
    };
    assert!(grad_check(&build, &inputs) < 1e-9);
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 5.0]));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![3.0]));
    let sq = tape.square(x);
    let s = tape.sum(sq);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[6.0]);

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![3.0, 1.0]));
    assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
}

#[test]
fn unused_leaf_gets_zero_gradient_and_constants_get_none() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    let unused = tape.leaf(Tensor::vector(vec![4.0]));
    let c = tape.constant(Tensor::vector(vec![1.0, 1.0]));
    let y = tape.mul(x, c).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(unused).unwrap().data(), &[0.0]);
    assert!(g.get(c).is_none());
}

#[test]
fn fresh_tape_is_empty() {
    assert!(Tape::new().is_empty());
}

#[test]
fn mlp_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let inputs = [
        random(&[5, 3], &mut rng),
        random(&[3, 8], &mut rng),
        random(&[8], &mut rng),
        random(&[8, 2], &mut rng),
        random(&[2], &mut rng),
        random(&[5, 2], &mut rng),
    ];
    let build = |t: &mut Tape, v: &[Var]| {
        let h = t.matmul(v[0], v[1]).unwrap();
        let h = t.add_row_bias(h, v[2]).unwrap();
        let h = t.silu(h);
        let o = t.matmul(h, v[3]).unwrap();
        let o = t.add_row_bias(o, v[4]).unwrap();
        t.mse(o, v[5]).unwrap()
    };
    assert!(grad_check(&build, &inputs) < 1e-5);
}

#[test]
fn finite_difference_examples() {
    let x = Tensor::vector(vec![3.0]);
    let g = finite_difference_gradient(|t| t.data()[0] * t.data()[0], &x, 1e-6);
    assert!((g.data()[0] - 6.0).abs() < 1e-6);
    let g = finite_difference_gradient(|_| 4.2, &Tensor::vector(vec![1.0, 2.0]), 1e-6);
    assert_eq!(g.data(), &[0.0, 0.0]);
}

#[test]
fn structural_op_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = [
        random(&[2, 4, 4], &mut rng),
        random(&[], &mut rng),
        random(&[2], &mut rng),
        random(&[2], &mut rng),
    ];
    let build = |t: &mut Tape, v: &[Var]| {
        let p = t.avg_pool2(v[0]).unwrap();
        let u = t.upsample2(p).unwrap();
        let m = t.mul(u, v[0]).unwrap();
        let a = t.channel_affine(m, v[2], v[3]).unwrap();
        let d = t.div_var(a, v[1]).unwrap();
        let d = t.add_scalar(d, 0.3);
        let top = t.slice_rows(d, 1, 1).unwrap();
        let both = t.concat_rows(&[top, d]).unwrap();
        let flat = t.reshape(both, &[3, 16]).unwrap();
        let extra = t.mul_var(flat, v[1]).unwrap();
        let joined = t.concat_cols(flat, extra).unwrap();
        let r = t.relu(joined);
        let q = t.blend(v[1], r, joined).unwrap();
        weighted_sum(t, q)
    };
    // Keep the divisor away from zero.
    let mut inputs = inputs;
    inputs[1] = Tensor::scalar(1.3);
    assert!(grad_check(&build, &inputs) < 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn elementwise_and_reductions_match_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random(&[2, 3], &mut rng), random(&[2, 3], &mut rng), random(&[], &mut rng)];
        let build = |t: &mut Tape, v: &[Var]| {
            let a = t.add(v[0], v[1]).unwrap();
            let s = t.sub(a, v[1]).unwrap();
            let m = t.mul(s, v[1]).unwrap();
            let k = t.scale(m, -0.7);
            let l = t.blend(v[2], k, v[0]).unwrap();
            let e = t.silu(l);
            let sm = t.softmax(e);
            let c = t.cumsum(sm);
            let w = weighted_sum(t, c);
            let mean = t.mean(e);
            t.add(w, mean).unwrap()
        };
        prop_assert!(grad_check(&build, &inputs) < 1e-5);
    }

    #[test]
    fn softmax_normalized_and_shift_invariant(xs in prop::collection::vec(-2.0f64..2.0, 1..20), c in -50.0f64..50.0) {
        let x = Tensor::vector(xs);
        let p = softmax_values(&x);
        prop_assert!((p.sum() - 1.0).abs() < 1e-12);
        prop_assert!(p.data().iter().all(|&v| v > 0.0));
        let q = softmax_values(&x.map(|v| v + c));
        prop_assert!(p.max_abs_diff(&q) < 1e-12);
    }

    #[test]
    fn cumsum_last_is_total(xs in prop::collection::vec(-2.0f64..2.0, 1..50)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(xs.clone()));
        let c = tape.cumsum(x);
        let total: f64 = xs.iter().sum();
        prop_assert!((tape.value(c).data().last().unwrap() - total).abs() < 1e-12);
    }

    #[test]
    fn backward_is_linear(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[4], &mut rng);
        let f = |t: &mut Tape, v: Var| { let s = t.silu(v); weighted_sum(t, s) };
        let g = |t: &mut Tape, v: Var| { let s = t.square(v); t.sum(s) };
        let grad_of = |which: u8| {
            let mut t = Tape::new();
            let v = t.leaf(x.clone());
            let out = match which {
                0 => f(&mut t, v),
                1 => g(&mut t, v),
                _ => {
                    let fv = f(&mut t, v);
                    let gv = g(&mut t, v);
                    let fa = t.scale(fv, a);
                    let gb = t.scale(gv, b);
                    t.add(fa, gb).unwrap()
                }
            };
            t.backward(out).unwrap().get(v).unwrap().clone()
        };
        let (gf, gg, gc) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..4 {
            let want = a * gf.data()[i] + b * gg.data()[i];
            prop_assert!((gc.data()[i] - want).abs() < 1e-10);
        }
    }
}
