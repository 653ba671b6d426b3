//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to a [`Tape`]. Nodes hold their forward
//! value plus whatever the adjoint rule needs; [`Tape::backward`] consumes the
//! tape and replays the adjoints in reverse order.

mod check;
pub(crate) mod kernels;

pub use check::{finite_difference_gradient, relative_error};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;
use kernels::{col2im3, gemm, im2col3, sigmoid};

/// Group-norm variance stabilizer.
pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulVar(Var, Var),
    DivVar(Var, Var),
    Blend {
        lambda: Var,
        a: Var,
        b: Var,
    },
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        cols: Vec<f64>,
    },
    Act(Activation, Var),
    GroupNorm {
        x: Var,
        gain: Var,
        shift: Var,
        groups: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Softmax(Var),
    CumSum(Var),
    Sum(Var),
    Mean(Var),
    Square(Var),
    Select(Var, usize),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    Reshape(Var),
    AvgPool2(Var),
    Upsample2(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Ordered record of executed operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the tracked leaves of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` is not a tracked leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn channels_and_rest(shape: &[usize]) -> Result<(usize, usize)> {
    match shape.split_first() {
        Some((&c, rest)) => Ok((c, rest.iter().product())),
        None => shape_err("expected a tensor with a leading channel axis"),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Registers a tensor whose gradient is wanted.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a tensor that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.value(a).zip_map(self.value(b), f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, k), &[a])
    }

    /// Divides by a nonzero constant.
    pub fn div_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x / k);
        self.push(v, Op::Scale(a, 1.0 / k), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::AddScalar(a), &[a])
    }

    fn expect_scalar(&self, s: Var) -> Result<f64> {
        let t = self.value(s);
        if t.len() != 1 {
            return shape_err(format!("expected a scalar, got shape {:?}", t.shape()));
        }
        Ok(t.item())
    }

    /// Multiplies every element of `a` by the one-element tensor `s`.
    pub fn mul_var(&mut self, a: Var, s: Var) -> Result<Var> {
        let k = self.expect_scalar(s)?;
        let v = self.value(a).map(|x| x * k);
        Ok(self.push(v, Op::MulVar(a, s), &[a, s]))
    }

    /// Divides every element of `a` by the one-element tensor `s`.
    pub fn div_var(&mut self, a: Var, s: Var) -> Result<Var> {
        let k = self.expect_scalar(s)?;
        let v = self.value(a).map(|x| x / k);
        Ok(self.push(v, Op::DivVar(a, s), &[a, s]))
    }

    /// `(1 − λ)·a + λ·b` with a one-element `lambda`.
    pub fn blend(&mut self, lambda: Var, a: Var, b: Var) -> Result<Var> {
        let l = self.expect_scalar(lambda)?;
        let v = self.binary(a, b, |x, y| (1.0 - l) * x + l * y)?;
        Ok(self.push(v, Op::Blend { lambda, a, b }, &[lambda, a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err(format!("matmul of {:?} and {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb != [sx[1]] {
            return shape_err(format!("row bias {:?} for matrix {:?}", sb, sx));
        }
        let n = sx[1];
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(n) {
            row.iter_mut().zip(&b).for_each(|(r, bb)| *r += bb);
        }
        Ok(self.push(v, Op::AddRowBias(x, bias), &[x, bias]))
    }

    /// 3×3 convolution, stride 1, zero padding 1, on a `C_in×H×W` input.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 3 {
            return shape_err(format!("conv2d input must be C×H×W, got {:?}", sx));
        }
        if sw.len() != 4 || sw[2] != 3 || sw[3] != 3 {
            return shape_err(format!("conv2d kernel must be C_out×C_in×3×3, got {:?}", sw));
        }
        if sw[1] != sx[0] {
            return shape_err(format!(
                "conv2d channel mismatch: input has {}, kernel expects {}",
                sx[0], sw[1]
            ));
        }
        if sb != [sw[0]] {
            return shape_err(format!("conv2d bias {:?} for {} output channels", sb, sw[0]));
        }
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        let cout = sw[0];
        let hw = h * wd;
        let cols = im2col3(self.value(x).data(), cin, h, wd);
        let mut out = vec![0.0; cout * hw];
        for (c, &bias) in self.value(b).data().iter().enumerate() {
            out[c * hw..(c + 1) * hw].fill(bias);
        }
        gemm(cout, cin * 9, hw, self.value(w).data(), false, &cols, false, &mut out, 1.0);
        let v = Tensor::new(vec![cout, h, wd], out)?;
        Ok(self.push(v, Op::Conv2d { x, w, b, cols }, &[x, w, b]))
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Var {
        let v = match kind {
            Activation::Relu => self.value(x).map(|u| u.max(0.0)),
            Activation::Silu => self.value(x).map(|u| u * sigmoid(u)),
        };
        self.push(v, Op::Act(kind, x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(Activation::Relu, x)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.activation(Activation::Silu, x)
    }

    /// Group normalization over a `C×…` tensor followed by a per-channel
    /// affine map.
    pub fn group_norm(&mut self, x: Var, groups: usize, gain: Var, shift: Var) -> Result<Var> {
        let (c, rest) = channels_and_rest(self.shape(x))?;
        if groups == 0 || c % groups != 0 {
            return shape_err(format!("{} channels not divisible into {} groups", c, groups));
        }
        if self.shape(gain) != [c] || self.shape(shift) != [c] {
            return shape_err(format!("group_norm affine parameters must have shape [{}]", c));
        }
        let per_group = (c / groups) * rest;
        let xs = self.value(x).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = Vec::with_capacity(groups);
        for g in 0..groups {
            let chunk = &xs[g * per_group..(g + 1) * per_group];
            let n = per_group as f64;
            let mean = chunk.iter().sum::<f64>() / n;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + GROUP_NORM_EPS).sqrt();
            for (o, &v) in xhat[g * per_group..(g + 1) * per_group].iter_mut().zip(chunk) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let (gn, sh) = (self.value(gain).data(), self.value(shift).data());
        let mut out = vec![0.0; xs.len()];
        for ch in 0..c {
            for i in ch * rest..(ch + 1) * rest {
                out[i] = gn[ch] * xhat[i] + sh[ch];
            }
        }
        let v = Tensor::new(self.shape(x).to_vec(), out)?;
        let op = Op::GroupNorm {
            x,
            gain,
            shift,
            groups,
            xhat,
            inv_std,
        };
        Ok(self.push(v, op, &[x, gain, shift]))
    }

    /// Per-channel `scale[c]·x + shift[c]` on a `C×…` tensor.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (c, rest) = channels_and_rest(self.shape(x))?;
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return shape_err(format!(
                "channel modulation of shapes {:?}/{:?} for {} channels",
                self.shape(scale),
                self.shape(shift),
                c
            ));
        }
        let (sc, sh) = (self.value(scale).data(), self.value(shift).data());
        let xs = self.value(x).data();
        let mut out = vec![0.0; xs.len()];
        for ch in 0..c {
            for i in ch * rest..(ch + 1) * rest {
                out[i] = sc[ch] * xs[i] + sh[ch];
            }
        }
        let v = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(v, Op::ChannelAffine { x, scale, shift }, &[x, scale, shift]))
    }

    /// Softmax over all elements, with max-subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = softmax_values(self.value(x));
        self.push(v, Op::Softmax(x), &[x])
    }

    /// Inclusive prefix sum over all elements in storage order.
    pub fn cumsum(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        let mut acc = 0.0;
        for e in v.data_mut() {
            acc += *e;
            *e = acc;
        }
        self.push(v, Op::CumSum(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(v, Op::Mean(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|u| u * u);
        self.push(v, Op::Square(x), &[x])
    }

    /// Element `index` of `x` (storage order) as a scalar.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        if index >= t.len() {
            return shape_err(format!("index {} out of range for {} elements", index, t.len()));
        }
        let v = Tensor::scalar(t.data()[index]);
        Ok(self.push(v, Op::Select(x, index), &[x]))
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, inner) = channels_and_rest(self.shape(x))?;
        if start + len > rows {
            return shape_err(format!("rows {}..{} out of range for {}", start, start + len, rows));
        }
        let mut shape = self.shape(x).to_vec();
        shape[0] = len;
        let data = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::SliceRows(x, start), &[x]))
    }

    /// Concatenates along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat of zero tensors");
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return shape_err(format!("concat rows of {:?} with trailing {:?}", s, tail));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Joins an `m×p` and an `m×q` matrix into `m×(p+q)`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return shape_err(format!("concat cols of {:?} and {:?}", sa, sb));
        }
        let (m, p, q) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            data.extend_from_slice(&da[r * p..(r + 1) * p]);
            data.extend_from_slice(&db[r * q..(r + 1) * q]);
        }
        let v = Tensor::new(vec![m, p + q], data)?;
        Ok(self.push(v, Op::ConcatCols(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// 2×2 average pooling on a `C×H×W` tensor with even `H` and `W`.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return shape_err(format!("avg_pool2 needs C×H×W with even H, W; got {:?}", s));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / 2, w / 2);
        let xs = self.value(x).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    let base = ch * h * w;
                    let s = xs[base + 2 * y * w + 2 * xx]
                        + xs[base + 2 * y * w + 2 * xx + 1]
                        + xs[base + (2 * y + 1) * w + 2 * xx]
                        + xs[base + (2 * y + 1) * w + 2 * xx + 1];
                    out[ch * ho * wo + y * wo + xx] = 0.25 * s;
                }
            }
        }
        let v = Tensor::new(vec![c, ho, wo], out)?;
        Ok(self.push(v, Op::AvgPool2(x), &[x]))
    }

    /// Nearest-neighbour 2× upsampling on a `C×H×W` tensor.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return shape_err(format!("upsample2 needs C×H×W, got {:?}", s));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (2 * h, 2 * w);
        let xs = self.value(x).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    out[ch * ho * wo + y * wo + xx] = xs[ch * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let v = Tensor::new(vec![c, ho, wo], out)?;
        Ok(self.push(v, Op::Upsample2(x), &[x]))
    }

    /// Mean of squared differences between `pred` and `target`.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Replays the adjoint rules in reverse and returns gradients for every
    /// tracked leaf. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.rank() != 0 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![1.0]);
        }

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
                if !nodes[v.0].tracked {
                    return;
                }
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                f(slot);
            };
            let val = |v: Var| nodes[v.0].value.data();
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc(*a, &mut |s| add_into(s, &g));
                    acc(*b, &mut |s| add_into(s, &g));
                }
                Op::Sub(a, b) => {
                    acc(*a, &mut |s| add_into(s, &g));
                    acc(*b, &mut |s| s.iter_mut().zip(&g).for_each(|(o, gg)| *o -= gg));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    acc(*a, &mut |s| {
                        for ((o, gg), y) in s.iter_mut().zip(&g).zip(vb) {
                            *o += gg * y;
                        }
                    });
                    acc(*b, &mut |s| {
                        for ((o, gg), x) in s.iter_mut().zip(&g).zip(va) {
                            *o += gg * x;
                        }
                    });
                }
                Op::Scale(a, k) => acc(*a, &mut |s| {
                    s.iter_mut().zip(&g).for_each(|(o, gg)| *o += gg * k)
                }),
                Op::AddScalar(a) => acc(*a, &mut |s| add_into(s, &g)),
                Op::MulVar(a, sv) => {
                    let k = val(*sv)[0];
                    let va = val(*a);
                    acc(*a, &mut |s| s.iter_mut().zip(&g).for_each(|(o, gg)| *o += gg * k));
                    let dk: f64 = g.iter().zip(va).map(|(gg, x)| gg * x).sum();
                    acc(*sv, &mut |s| s[0] += dk);
                }
                Op::DivVar(a, sv) => {
                    let k = val(*sv)[0];
                    let va = val(*a);
                    acc(*a, &mut |s| s.iter_mut().zip(&g).for_each(|(o, gg)| *o += gg / k));
                    let dk: f64 = -g.iter().zip(va).map(|(gg, x)| gg * x).sum::<f64>() / (k * k);
                    acc(*sv, &mut |s| s[0] += dk);
                }
                Op::Blend { lambda, a, b } => {
                    let l = val(*lambda)[0];
                    let (va, vb) = (val(*a), val(*b));
                    acc(*a, &mut |s| {
                        s.iter_mut().zip(&g).for_each(|(o, gg)| *o += (1.0 - l) * gg)
                    });
                    acc(*b, &mut |s| s.iter_mut().zip(&g).for_each(|(o, gg)| *o += l * gg));
                    let dl: f64 = g
                        .iter()
                        .zip(va.iter().zip(vb))
                        .map(|(gg, (x, y))| gg * (y - x))
                        .sum();
                    acc(*lambda, &mut |s| s[0] += dl);
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let (va, vb) = (val(*a), val(*b));
                    acc(*a, &mut |s| gemm(m, n, k, &g, false, vb, true, s, 1.0));
                    acc(*b, &mut |s| gemm(k, m, n, va, true, &g, false, s, 1.0));
                }
                Op::AddRowBias(x, bias) => {
                    let n = nodes[bias.0].value.len();
                    acc(*x, &mut |s| add_into(s, &g));
                    acc(*bias, &mut |s| {
                        for row in g.chunks(n) {
                            add_into(s, row);
                        }
                    });
                }
                Op::Conv2d { x, w, b, cols } => {
                    let sx = nodes[x.0].value.shape();
                    let (cin, h, wd) = (sx[0], sx[1], sx[2]);
                    let cout = nodes[w.0].value.shape()[0];
                    let hw = h * wd;
                    acc(*b, &mut |s| {
                        for (c, o) in s.iter_mut().enumerate() {
                            *o += g[c * hw..(c + 1) * hw].iter().sum::<f64>();
                        }
                    });
                    acc(*w, &mut |s| gemm(cout, hw, cin * 9, &g, false, cols, true, s, 1.0));
                    let vw = val(*w);
                    acc(*x, &mut |s| {
                        let mut dcols = vec![0.0; cin * 9 * hw];
                        gemm(cin * 9, cout, hw, vw, true, &g, false, &mut dcols, 0.0);
                        col2im3(&dcols, cin, h, wd, s);
                    });
                }
                Op::Act(kind, x) => {
                    let vx = val(*x);
                    acc(*x, &mut |s| {
                        for ((o, gg), &u) in s.iter_mut().zip(&g).zip(vx) {
                            *o += gg * match kind {
                                Activation::Relu => {
                                    if u > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Activation::Silu => {
                                    let sg = sigmoid(u);
                                    sg * (1.0 + u * (1.0 - sg))
                                }
                            };
                        }
                    });
                }
                Op::GroupNorm {
                    x,
                    gain,
                    shift,
                    groups,
                    xhat,
                    inv_std,
                } => {
                    let (c, rest) = channels_and_rest(nodes[x.0].value.shape())?;
                    let gn = val(*gain);
                    acc(*shift, &mut |s| {
                        for (ch, o) in s.iter_mut().enumerate() {
                            *o += g[ch * rest..(ch + 1) * rest].iter().sum::<f64>();
                        }
                    });
                    acc(*gain, &mut |s| {
                        for (ch, o) in s.iter_mut().enumerate() {
                            let r = ch * rest..(ch + 1) * rest;
                            *o += g[r.clone()].iter().zip(&xhat[r]).map(|(a, b)| a * b).sum::<f64>();
                        }
                    });
                    acc(*x, &mut |s| {
                        let per_group = (c / groups) * rest;
                        let n = per_group as f64;
                        let mut dxhat = vec![0.0; g.len()];
                        for ch in 0..c {
                            for i in ch * rest..(ch + 1) * rest {
                                dxhat[i] = g[i] * gn[ch];
                            }
                        }
                        for grp in 0..*groups {
                            let r = grp * per_group..(grp + 1) * per_group;
                            let sum_d: f64 = dxhat[r.clone()].iter().sum();
                            let sum_dx: f64 = dxhat[r.clone()]
                                .iter()
                                .zip(&xhat[r.clone()])
                                .map(|(a, b)| a * b)
                                .sum();
                            let inv = inv_std[grp];
                            for i in r {
                                s[i] += inv / n * (n * dxhat[i] - sum_d - xhat[i] * sum_dx);
                            }
                        }
                    });
                }
                Op::ChannelAffine { x, scale, shift } => {
                    let (_, rest) = channels_and_rest(nodes[x.0].value.shape())?;
                    let (vx, sc) = (val(*x), val(*scale));
                    acc(*shift, &mut |s| {
                        for (ch, o) in s.iter_mut().enumerate() {
                            *o += g[ch * rest..(ch + 1) * rest].iter().sum::<f64>();
                        }
                    });
                    acc(*scale, &mut |s| {
                        for (ch, o) in s.iter_mut().enumerate() {
                            let r = ch * rest..(ch + 1) * rest;
                            *o += g[r.clone()].iter().zip(&vx[r]).map(|(a, b)| a * b).sum::<f64>();
                        }
                    });
                    acc(*x, &mut |s| {
                        for (i, o) in s.iter_mut().enumerate() {
                            *o += g[i] * sc[i / rest];
                        }
                    });
                }
                Op::Softmax(x) => {
                    let p = node.value.data();
                    let dot: f64 = g.iter().zip(p).map(|(a, b)| a * b).sum();
                    acc(*x, &mut |s| {
                        for ((o, gg), pp) in s.iter_mut().zip(&g).zip(p) {
                            *o += pp * (gg - dot);
                        }
                    });
                }
                Op::CumSum(x) => acc(*x, &mut |s| {
                    let mut run = 0.0;
                    for (o, gg) in s.iter_mut().zip(&g).rev() {
                        run += gg;
                        *o += run;
                    }
                }),
                Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|o| *o += g[0])),
                Op::Mean(x) => {
                    let n = nodes[x.0].value.len() as f64;
                    acc(*x, &mut |s| s.iter_mut().for_each(|o| *o += g[0] / n));
                }
                Op::Square(x) => {
                    let vx = val(*x);
                    acc(*x, &mut |s| {
                        for ((o, gg), u) in s.iter_mut().zip(&g).zip(vx) {
                            *o += 2.0 * u * gg;
                        }
                    });
                }
                Op::Select(x, idx) => acc(*x, &mut |s| s[*idx] += g[0]),
                Op::SliceRows(x, start) => {
                    let inner: usize = nodes[x.0].value.shape()[1..].iter().product();
                    acc(*x, &mut |s| add_into(&mut s[start * inner..start * inner + g.len()], &g));
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = nodes[p.0].value.len();
                        acc(*p, &mut |s| add_into(s, &g[off..off + len]));
                        off += len;
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                    let (m, p, q) = (sa[0], sa[1], sb[1]);
                    acc(*a, &mut |s| {
                        for r in 0..m {
                            add_into(&mut s[r * p..(r + 1) * p], &g[r * (p + q)..r * (p + q) + p]);
                        }
                    });
                    acc(*b, &mut |s| {
                        for r in 0..m {
                            add_into(
                                &mut s[r * q..(r + 1) * q],
                                &g[r * (p + q) + p..(r + 1) * (p + q)],
                            );
                        }
                    });
                }
                Op::Reshape(x) => acc(*x, &mut |s| add_into(s, &g)),
                Op::AvgPool2(x) => {
                    let sx = nodes[x.0].value.shape();
                    let (c, h, w) = (sx[0], sx[1], sx[2]);
                    let (ho, wo) = (h / 2, w / 2);
                    acc(*x, &mut |s| {
                        for ch in 0..c {
                            for y in 0..h {
                                for xx in 0..w {
                                    s[ch * h * w + y * w + xx] +=
                                        0.25 * g[ch * ho * wo + (y / 2) * wo + xx / 2];
                                }
                            }
                        }
                    });
                }
                Op::Upsample2(x) => {
                    let sx = nodes[x.0].value.shape();
                    let (c, h, w) = (sx[0], sx[1], sx[2]);
                    let (ho, wo) = (2 * h, 2 * w);
                    acc(*x, &mut |s| {
                        for ch in 0..c {
                            for y in 0..ho {
                                for xx in 0..wo {
                                    s[ch * h * w + (y / 2) * w + xx / 2] +=
                                        g[ch * ho * wo + y * wo + xx];
                                }
                            }
                        }
                    });
                }
            }
        }

        let grads = nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if node.tracked && matches!(node.op, Op::Leaf) {
                    let data = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                    Some(Tensor::new(node.value.shape().to_vec(), data).expect("gradient shape"))
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Softmax of all elements of `x`, stabilized by subtracting the maximum.
pub fn softmax_values(x: &Tensor) -> Tensor {
    let m = x.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = x.map(|v| (v - m).exp());
    let z = e.sum();
    e.map(|v| v / z)
}

#[cfg(test)]
mod tests;
