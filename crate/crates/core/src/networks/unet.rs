use std::collections::HashMap;

use crate::autodiff::{Tape, Var};
use crate::conditioning::{film_coefficients, FilmLayer};
use crate::error::{Error, Result};
use crate::params::{Init, ParamKind, ParamSpec};

use super::{Dropout, GROUP_NORM_FLOPS, SILU_FLOPS};

/// Normalization layers in execution order, with the width they normalize
/// expressed as a multiple of the base width.
const NORMS: [(&str, usize); 7] = [
    ("enc.norm1", 1),
    ("enc.norm2", 1),
    ("mid.norm1", 2),
    ("mid.norm2", 2),
    ("dec.norm1", 1),
    ("dec.norm2", 1),
    ("out.norm", 1),
];

/// Two-level U-Net for small images.
///
/// `conv_in` lifts the input to `width` channels; a residual block runs at
/// full resolution; 2×2 average pooling and a conv move to `2·width`
/// channels at half resolution for a second residual block; nearest
/// upsampling and a conv return to `width` channels, the full-resolution
/// skip is added, a third residual block follows, and a zero-initialized
/// `conv_out` projects back to the data channels.
///
/// With `film_dim` set, every normalization layer is modulated by
/// coefficients computed from a sinusoidal embedding of that size.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyUNet {
    pub in_channels: usize,
    pub out_channels: usize,
    pub width: usize,
    pub groups: usize,
    pub film_dim: Option<usize>,
    index: HashMap<String, usize>,
}

impl TinyUNet {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        width: usize,
        groups: usize,
        film_dim: Option<usize>,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || width == 0 {
            return Err(Error::Config("U-Net channel counts must be positive".into()));
        }
        if groups == 0 || width % groups != 0 {
            return Err(Error::Config(format!("width {} not divisible into {} groups", width, groups)));
        }
        if matches!(film_dim, Some(d) if d == 0 || d % 2 != 0) {
            return Err(Error::Config("FiLM embedding dimension must be even and positive".into()));
        }
        let mut net = Self {
            in_channels,
            out_channels,
            width,
            groups,
            film_dim,
            index: HashMap::new(),
        };
        net.index = net
            .manifest()
            .into_iter()
            .enumerate()
            .map(|(i, s)| (s.name, i))
            .collect();
        Ok(net)
    }

    pub fn manifest(&self) -> Vec<ParamSpec> {
        let w = self.width;
        let mut out = Vec::new();
        let mut conv = |name: &str, cout: usize, cin: usize, zero: bool| {
            let init = if zero { Init::Zeros } else { Init::FanInUniform(cin * 9) };
            out.push(ParamSpec::new(format!("{name}.weight"), &[cout, cin, 3, 3], ParamKind::ConvWeight, init));
            out.push(ParamSpec::new(format!("{name}.bias"), &[cout], ParamKind::ConvBias, Init::Zeros));
        };
        conv("conv_in", w, self.in_channels, false);
        conv("enc.conv1", w, w, false);
        conv("enc.conv2", w, w, false);
        conv("down", 2 * w, w, false);
        conv("mid.conv1", 2 * w, 2 * w, false);
        conv("mid.conv2", 2 * w, 2 * w, false);
        conv("up", w, 2 * w, false);
        conv("dec.conv1", w, w, false);
        conv("dec.conv2", w, w, false);
        conv("conv_out", self.out_channels, w, true);
        for (name, mult) in NORMS {
            let c = mult * w;
            out.push(ParamSpec::new(format!("{name}.gain"), &[c], ParamKind::NormParam, Init::Ones));
            out.push(ParamSpec::new(format!("{name}.shift"), &[c], ParamKind::NormParam, Init::Zeros));
        }
        if let Some(e) = self.film_dim {
            out.push(ParamSpec::new("film.embed.weight", &[e, 2 * e], ParamKind::LinearWeight, Init::FanInUniform(e)));
            out.push(ParamSpec::new("film.embed.bias", &[2 * e], ParamKind::LinearBias, Init::Zeros));
            for (name, mult) in NORMS {
                let c = mult * w;
                out.push(ParamSpec::new(format!("film.{name}.weight"), &[2 * e, 2 * c], ParamKind::LinearWeight, Init::Zeros));
                out.push(ParamSpec::new(format!("film.{name}.bias"), &[2 * c], ParamKind::LinearBias, Init::Zeros));
            }
        }
        out
    }

    fn p(&self, params: &[Var], name: &str) -> Var {
        params[self.index[name]]
    }

    /// FiLM `(scale, shift)` pairs for every normalization layer, computed
    /// once per forward pass from the embedding `emb`.
    pub fn film_coefficients(&self, tape: &mut Tape, params: &[Var], emb: Var) -> Result<Vec<(Var, Var)>> {
        if self.film_dim.is_none() {
            return Err(Error::Config("network was built without FiLM layers".into()));
        }
        NORMS
            .iter()
            .map(|&(name, mult)| {
                let layer = FilmLayer {
                    w1: self.p(params, "film.embed.weight"),
                    b1: self.p(params, "film.embed.bias"),
                    w2: self.p(params, &format!("film.{name}.weight")),
                    b2: self.p(params, &format!("film.{name}.bias")),
                };
                film_coefficients(tape, emb, &layer, mult * self.width)
            })
            .collect()
    }

    fn norm(&self, tape: &mut Tape, params: &[Var], h: Var, k: usize, film: Option<&[(Var, Var)]>) -> Result<Var> {
        let name = NORMS[k].0;
        let gain = self.p(params, &format!("{name}.gain"));
        let shift = self.p(params, &format!("{name}.shift"));
        let n = tape.group_norm(h, self.groups, gain, shift)?;
        match film {
            Some(coeffs) => tape.channel_affine(n, coeffs[k].0, coeffs[k].1),
            None => Ok(n),
        }
    }

    fn conv(&self, tape: &mut Tape, params: &[Var], h: Var, name: &str) -> Result<Var> {
        let w = self.p(params, &format!("{name}.weight"));
        let b = self.p(params, &format!("{name}.bias"));
        tape.conv2d(h, w, b)
    }

    #[allow(clippy::too_many_arguments)]
    fn res_block(
        &self,
        tape: &mut Tape,
        params: &[Var],
        h: Var,
        block: &str,
        first_norm: usize,
        film: Option<&[(Var, Var)]>,
        dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        let a = self.norm(tape, params, h, first_norm, film)?;
        let a = tape.silu(a);
        let a = self.conv(tape, params, a, &format!("{block}.conv1"))?;
        let a = self.norm(tape, params, a, first_norm + 1, film)?;
        let mut a = tape.silu(a);
        if let Some(d) = dropout {
            a = d.apply(tape, a);
        }
        let a = self.conv(tape, params, a, &format!("{block}.conv2"))?;
        tape.add(h, a)
    }

    /// One image `C_in×H×W` (H, W even) to `C_out×H×W`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        film: Option<&[(Var, Var)]>,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[0] != self.in_channels {
            return Err(Error::Shape(format!(
                "U-Net expects {}×H×W input, got {:?}",
                self.in_channels, shape
            )));
        }
        let h = self.conv(tape, params, x, "conv_in")?;
        let skip = self.res_block(tape, params, h, "enc", 0, film, dropout.as_deref_mut())?;
        let d = tape.avg_pool2(skip)?;
        let d = self.conv(tape, params, d, "down")?;
        let d = self.res_block(tape, params, d, "mid", 2, film, dropout.as_deref_mut())?;
        let u = tape.upsample2(d)?;
        let u = self.conv(tape, params, u, "up")?;
        let u = tape.add(u, skip)?;
        let u = self.res_block(tape, params, u, "dec", 4, film, dropout.as_deref_mut())?;
        let o = self.norm(tape, params, u, 6, film)?;
        let o = tape.silu(o);
        self.conv(tape, params, o, "conv_out")
    }

    /// Approximate floating-point cost of one forward pass on a batch of
    /// `h×w` images, excluding the FiLM pathway.
    pub fn forward_flops(&self, batch: usize, h: usize, w: usize) -> usize {
        let (c, hw, hw2) = (self.width, h * w, (h / 2) * (w / 2));
        let conv = |cin: usize, cout: usize, pixels: usize| pixels * cout * (2 * cin * 9 + 1);
        let pointwise = |ch: usize, pixels: usize| ch * pixels * (GROUP_NORM_FLOPS + SILU_FLOPS);
        let per_image = conv(self.in_channels, c, hw)
            + 2 * conv(c, c, hw)
            + 2 * pointwise(c, hw)
            + c * hw
            + c * hw
            + conv(c, 2 * c, hw2)
            + 2 * conv(2 * c, 2 * c, hw2)
            + 2 * pointwise(2 * c, hw2)
            + 2 * c * hw2
            + conv(2 * c, c, hw)
            + c * hw
            + 2 * conv(c, c, hw)
            + 2 * pointwise(c, hw)
            + c * hw
            + pointwise(c, hw)
            + conv(c, self.out_channels, hw);
        batch * per_image
    }
}
