//! Baseline ways of feeding a scalar to a network: a constant input map,
//! FiLM modulation of normalized activations from a sinusoidal embedding,
//! and output rescaling by the noise level.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Conditioning mechanism. The string forms are the CLI vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    None,
    TMap,
    SigmaMap,
    Film,
    Ncsnv2,
    Dpi,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::None,
        Strategy::TMap,
        Strategy::SigmaMap,
        Strategy::Film,
        Strategy::Ncsnv2,
        Strategy::Dpi,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::TMap => "tmap",
            Strategy::SigmaMap => "sigmamap",
            Strategy::Film => "film",
            Strategy::Ncsnv2 => "ncsnv2",
            Strategy::Dpi => "dpi",
        }
    }

    /// Whether the network input carries one extra constant channel.
    pub fn appends_map(self) -> bool {
        matches!(self, Strategy::TMap | Strategy::SigmaMap)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown conditioning '{}' (expected none|tmap|sigmamap|film|ncsnv2|dpi)",
                    s
                ))
            })
    }
}

/// Appends one constant-valued coordinate or channel.
///
/// `[d]` becomes `[d+1]`, a batch of points `[B×d]` becomes `[B×(d+1)]`, and
/// an image `[C×H×W]` becomes `[(C+1)×H×W]`.
pub fn scalar_map_concat(tape: &mut Tape, x: Var, value: f64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    match shape.len() {
        1 => {
            let c = tape.constant(Tensor::vector(vec![value]));
            tape.concat_rows(&[x, c])
        }
        2 => {
            let c = tape.constant(Tensor::full(&[shape[0], 1], value));
            tape.concat_cols(x, c)
        }
        3 => {
            let c = tape.constant(Tensor::full(&[1, shape[1], shape[2]], value));
            tape.concat_rows(&[x, c])
        }
        _ => Err(Error::Shape(format!("cannot append a scalar map to shape {:?}", shape))),
    }
}

/// Transformer-style embedding: `sin(t·ω_k)` for the first half and
/// `cos(t·ω_k)` for the second, with `ω_k = 10000^(−2k/dim)`.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Usage(format!("embedding dimension must be even and positive, got {}", dim)));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let omega = 10000f64.powf(-2.0 * k as f64 / dim as f64);
        out[k] = (t * omega).sin();
        out[half + k] = (t * omega).cos();
    }
    Ok(Tensor::vector(out))
}

/// Tape handles for the FiLM pathway of one normalization layer: a hidden
/// layer shared across layers followed by a per-layer projection to
/// `[raw_scale, shift]`.
#[derive(Clone, Copy, Debug)]
pub struct FilmLayer {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// `[1 + raw_scale, shift]` for a layer with `channels` channels, computed
/// from the embedding `emb` of shape `[E]`.
pub fn film_coefficients(
    tape: &mut Tape,
    emb: Var,
    layer: &FilmLayer,
    channels: usize,
) -> Result<(Var, Var)> {
    let e = tape.value(emb).len();
    let row = tape.reshape(emb, &[1, e])?;
    let h = tape.matmul(row, layer.w1)?;
    let h = tape.add_row_bias(h, layer.b1)?;
    let h = tape.silu(h);
    let o = tape.matmul(h, layer.w2)?;
    let o = tape.add_row_bias(o, layer.b2)?;
    let width = tape.shape(o)[1];
    if width != 2 * channels {
        return Err(Error::Shape(format!(
            "FiLM projection yields {} values for {} channels",
            width, channels
        )));
    }
    let o = tape.reshape(o, &[width])?;
    let raw = tape.slice_rows(o, 0, channels)?;
    let shift = tape.slice_rows(o, channels, channels)?;
    let scale = tape.add_scalar(raw, 1.0);
    Ok((scale, shift))
}

/// `scale ⊙ group_norm(h) + shift` with per-channel `scale` and `shift`.
pub fn film_modulate(
    tape: &mut Tape,
    h: Var,
    groups: usize,
    gain: Var,
    bias: Var,
    scale: Var,
    shift: Var,
) -> Result<Var> {
    let n = tape.group_norm(h, groups, gain, bias)?;
    tape.channel_affine(n, scale, shift)
}

/// `base / σ`: the scalar enters only through the output magnitude.
pub fn ncsnv2_rescale(tape: &mut Tape, base: Var, sigma: f64) -> Result<Var> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("noise level must be positive, got {}", sigma)));
    }
    Ok(tape.div_scalar(base, sigma))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{finite_difference_gradient, relative_error};

    #[test]
    fn scalar_map_examples() {
        let mut tape = Tape::new();
        let img = tape.constant(Tensor::zeros(&[1, 2, 2]));
        let y = scalar_map_concat(&mut tape, img, 0.5).unwrap();
        assert_eq!(tape.shape(y), &[2, 2, 2]);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0, 0.0, 0.5, 0.5, 0.5, 0.5]);

        let y = scalar_map_concat(&mut tape, img, 0.0).unwrap();
        assert!(tape.value(y).data()[4..].iter().all(|&v| v == 0.0));

        let p = tape.constant(Tensor::vector(vec![0.3, -0.7]));
        let y = scalar_map_concat(&mut tape, p, 0.25).unwrap();
        assert_eq!(tape.value(y).data(), &[0.3, -0.7, 0.25]);

        let batch = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = scalar_map_concat(&mut tape, batch, 9.0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 9.0]);
    }

    #[test]
    fn removing_the_map_recovers_the_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_fn(&[3, 4, 4], |_| rng.gen());
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = scalar_map_concat(&mut tape, xv, 0.37).unwrap();
        let back = tape.slice_rows(y, 0, 3).unwrap();
        assert_eq!(tape.value(back), &x);
        let map = tape.slice_rows(y, 3, 1).unwrap();
        assert!(tape.value(map).data().iter().all(|&v| v == 0.37));
    }

    #[test]
    fn sinusoidal_examples() {
        assert_eq!(sinusoidal_embedding(0.0, 4).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
        let e1 = sinusoidal_embedding(1.0, 8).unwrap();
        assert!((e1.data()[0] - 0.841_470_984_807_896_5).abs() < 1e-15);
        let e0 = sinusoidal_embedding(0.0, 8).unwrap();
        for k in 0..4 {
            assert_ne!(e0.data()[k], e1.data()[k]);
        }
        assert!(matches!(sinusoidal_embedding(1.0, 5), Err(Error::Usage(_))));
    }

    #[test]
    fn sinusoidal_is_periodic_per_coordinate() {
        let dim = 8;
        for k in 0..dim / 2 {
            let omega = 10000f64.powf(-2.0 * k as f64 / dim as f64);
            let period = 2.0 * std::f64::consts::PI / omega;
            let a = sinusoidal_embedding(0.7, dim).unwrap();
            let b = sinusoidal_embedding(0.7 + period, dim).unwrap();
            assert!((a.data()[k] - b.data()[k]).abs() < 1e-9);
            assert!((a.data()[dim / 2 + k] - b.data()[dim / 2 + k]).abs() < 1e-9);
        }
    }

    fn film_fixture(tape: &mut Tape, vals: &[Tensor], tracked: bool) -> (FilmLayer, Var, Var, Var, Var) {
        let mut reg = |t: &Tensor| if tracked { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        let layer = FilmLayer {
            w1: reg(&vals[0]),
            b1: reg(&vals[1]),
            w2: reg(&vals[2]),
            b2: reg(&vals[3]),
        };
        let h = reg(&vals[4]);
        let gain = reg(&vals[5]);
        let bias = reg(&vals[6]);
        let emb = tape.constant(sinusoidal_embedding(3.0, 4).unwrap());
        (layer, h, gain, bias, emb)
    }

    fn film_values(seed: u64, zero_out: bool) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = |s: &[usize]| Tensor::from_fn(s, |_| rng.gen_range(-1.0..1.0));
        let w2 = if zero_out { Tensor::zeros(&[8, 4]) } else { r(&[8, 4]) };
        let b2 = if zero_out { Tensor::zeros(&[4]) } else { r(&[4]) };
        vec![r(&[4, 8]), r(&[8]), w2, b2, r(&[2, 3, 3]), r(&[2]), r(&[2])]
    }

    #[test]
    fn identity_modulation_is_plain_group_norm() {
        let vals = film_values(4, true);
        let mut tape = Tape::new();
        let (layer, h, gain, bias, emb) = film_fixture(&mut tape, &vals, false);
        let (scale, shift) = film_coefficients(&mut tape, emb, &layer, 2).unwrap();
        let y = film_modulate(&mut tape, h, 2, gain, bias, scale, shift).unwrap();
        let plain = tape.group_norm(h, 2, gain, bias).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(plain)) < 1e-12);
    }

    #[test]
    fn zero_scale_gives_constant_shift() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::from_fn(&[2, 2, 2], |i| i as f64));
        let one = tape.constant(Tensor::ones(&[2]));
        let zero = tape.constant(Tensor::zeros(&[2]));
        let c = tape.constant(Tensor::full(&[2], 1.5));
        let y = film_modulate(&mut tape, h, 1, one, zero, zero, c).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn film_channel_mismatch_is_shape_error() {
        let vals = film_values(5, false);
        let mut tape = Tape::new();
        let (layer, _, _, _, emb) = film_fixture(&mut tape, &vals, false);
        assert!(matches!(film_coefficients(&mut tape, emb, &layer, 3), Err(Error::Shape(_))));
    }

    #[test]
    fn film_gradients_reach_the_mlp() {
        let vals = film_values(6, false);
        let build = |tape: &mut Tape, tracked: bool, vals: &[Tensor]| {
            let (layer, h, gain, bias, emb) = film_fixture(tape, vals, tracked);
            let (scale, shift) = film_coefficients(tape, emb, &layer, 2).unwrap();
            let y = film_modulate(tape, h, 2, gain, bias, scale, shift).unwrap();
            let w = tape.constant(Tensor::from_fn(&[2, 3, 3], |i| (i as f64 * 0.9).cos()));
            let p = tape.mul(y, w).unwrap();
            (tape.sum(p), layer)
        };
        let mut tape = Tape::new();
        let (out, layer) = build(&mut tape, true, &vals);
        let handles = [layer.w1, layer.b1, layer.w2, layer.b2];
        let grads = tape.backward(out).unwrap();
        for k in 0..4 {
            let fd = finite_difference_gradient(
                |t| {
                    let mut v = vals.clone();
                    v[k] = t.clone();
                    let mut tape = Tape::new();
                    let (o, _) = build(&mut tape, false, &v);
                    tape.value(o).item()
                },
                &vals[k],
                1e-6,
            );
            let g = grads.get(handles[k]).unwrap();
            assert!(relative_error(g, &fd, 1e-8) < 1e-5, "parameter {k}");
        }
    }

    #[test]
    fn ncsnv2_examples() {
        let mut tape = Tape::new();
        let b = tape.constant(Tensor::vector(vec![1.0, -4.0]));
        let y = ncsnv2_rescale(&mut tape, b, 2.0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -2.0]);
        let y = ncsnv2_rescale(&mut tape, b, 1.0).unwrap();
        assert_eq!(tape.value(y), tape.value(b));
        assert!(matches!(ncsnv2_rescale(&mut tape, b, 0.0), Err(Error::Domain(_))));
        assert!(matches!(ncsnv2_rescale(&mut tape, b, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn strategy_names_round_trip() {
        for k in super::Strategy::ALL {
            assert_eq!(k.as_str().parse::<super::Strategy>().unwrap(), k);
        }
        assert!(matches!("mlp".parse::<super::Strategy>(), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn ncsnv2_scaling_is_exact(vals in prop::collection::vec(-5.0f64..5.0, 1..16), log_sigma in -4.0f64..5.0) {
            let sigma = 2f64.powf(log_sigma.round());
            let mut tape = Tape::new();
            let b = tape.constant(Tensor::vector(vals.clone()));
            let y = ncsnv2_rescale(&mut tape, b, sigma).unwrap();
            let out = tape.value(y).clone();
            for (o, v) in out.data().iter().zip(&vals) {
                prop_assert_eq!(o * sigma, *v);
            }
            let argmax = |d: &[f64]| d.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            prop_assert_eq!(argmax(out.data()), argmax(&vals));
            let nb = Tensor::vector(vals.clone()).norm();
            prop_assert!((out.norm() - nb / sigma).abs() <= 1e-12 * nb.max(1.0));
        }

        #[test]
        fn ncsnv2_scaling_round_trips_within_rounding(vals in prop::collection::vec(-5.0f64..5.0, 1..16), sigma in 1e-3f64..200.0) {
            let mut tape = Tape::new();
            let b = tape.constant(Tensor::vector(vals.clone()));
            let y = ncsnv2_rescale(&mut tape, b, sigma).unwrap();
            for (o, v) in tape.value(y).data().iter().zip(&vals) {
                prop_assert!((o * sigma - v).abs() <= 2.0 * f64::EPSILON * v.abs());
            }
        }

        #[test]
        fn embedding_is_bounded(t in -1e4f64..1e4) {
            let e = sinusoidal_embedding(t, 16).unwrap();
            prop_assert!(e.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
