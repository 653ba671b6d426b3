use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamKind, ParamSpec};

use super::Dropout;

/// Fully connected network for point data: SiLU between layers, no
/// normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct CondMlp {
    pub in_dim: usize,
    pub hidden: Vec<usize>,
    pub out_dim: usize,
}

impl CondMlp {
    pub fn new(in_dim: usize, hidden: Vec<usize>, out_dim: usize) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 || hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("MLP layer widths must be positive".into()));
        }
        Ok(Self {
            in_dim,
            hidden,
            out_dim,
        })
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.in_dim];
        w.extend(&self.hidden);
        w.push(self.out_dim);
        w
    }

    /// `l{k}.weight` (`in×out`) and `l{k}.bias` per layer. The last layer
    /// starts at zero so the initial prediction is 0.
    pub fn manifest(&self) -> Vec<ParamSpec> {
        let w = self.widths();
        let last = w.len() - 2;
        let mut out = Vec::new();
        for (k, pair) in w.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let init = if k == last { Init::Zeros } else { Init::FanInUniform(fan_in) };
            out.push(ParamSpec::new(format!("l{}.weight", k), &[fan_in, fan_out], ParamKind::LinearWeight, init));
            out.push(ParamSpec::new(format!("l{}.bias", k), &[fan_out], ParamKind::LinearBias, Init::Zeros));
        }
        out
    }

    /// `x` is `B×in_dim`; returns `B×out_dim`.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var, mut dropout: Option<&mut Dropout>) -> Result<Var> {
        let layers = self.hidden.len() + 1;
        if params.len() != 2 * layers {
            return Err(Error::Shape(format!("MLP expects {} parameter tensors, got {}", 2 * layers, params.len())));
        }
        let mut h = x;
        for k in 0..layers {
            h = tape.matmul(h, params[2 * k])?;
            h = tape.add_row_bias(h, params[2 * k + 1])?;
            if k + 1 < layers {
                h = tape.silu(h);
                if let Some(d) = dropout.as_deref_mut() {
                    h = d.apply(tape, h);
                }
            }
        }
        Ok(h)
    }

    pub fn forward_flops(&self, batch: usize) -> usize {
        let w = self.widths();
        let mut flops = 0;
        for (k, pair) in w.windows(2).enumerate() {
            flops += batch * (2 * pair[0] * pair[1] + pair[1]);
            if k + 2 < w.len() {
                flops += batch * pair[1] * super::SILU_FLOPS;
            }
        }
        flops
    }
}
