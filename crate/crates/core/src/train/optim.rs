use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Learning rate and decoupled weight decay for one tensor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupSettings {
    pub lr: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One AdamW update of `param` at step `k` (1-based), in place.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    settings: GroupSettings,
    hyper: AdamHyper,
    k: u64,
) -> Result<()> {
    if grad.shape() != param.shape() || m.shape() != param.shape() || v.shape() != param.shape() {
        return Err(Error::Shape(format!(
            "AdamW shapes differ: param {:?}, grad {:?}",
            param.shape(),
            grad.shape()
        )));
    }
    let AdamHyper { beta1, beta2, eps } = hyper;
    let bc1 = 1.0 - beta1.powi(k as i32);
    let bc2 = 1.0 - beta2.powi(k as i32);
    let (lr, wd) = (settings.lr, settings.weight_decay);
    let (p, g, m, v) = (param.data_mut(), grad.data(), m.data_mut(), v.data_mut());
    for i in 0..p.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] = p[i] - lr * (m_hat / (v_hat.sqrt() + eps)) - lr * wd * p[i];
    }
    Ok(())
}

/// AdamW over a fixed list of tensors, each with its own group settings.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    hyper: AdamHyper,
    groups: Vec<GroupSettings>,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(shapes: &[Vec<usize>], groups: Vec<GroupSettings>, hyper: AdamHyper) -> Result<Self> {
        if shapes.len() != groups.len() {
            return Err(Error::Shape(format!("{} tensors but {} group settings", shapes.len(), groups.len())));
        }
        Ok(Self {
            hyper,
            groups,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Restores the step counter and both moment lists.
    pub fn restore(&mut self, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<()> {
        let fits = |xs: &[Tensor], ys: &[Tensor]| xs.len() == ys.len() && xs.iter().zip(ys).all(|(a, b)| a.shape() == b.shape());
        if !fits(&m, &self.m) || !fits(&v, &self.v) {
            return Err(Error::Shape("optimizer moments do not match the parameters".into()));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        for (i, p) in params.into_iter().enumerate() {
            adamw_step(p, &grads[i], &mut self.m[i], &mut self.v[i], self.groups[i], self.hyper, self.step)?;
        }
        Ok(())
    }
}

/// `shadow ← decay·shadow + (1 − decay)·live`.
pub fn ema_update(shadow: &mut Tensor, live: &Tensor, decay: f64) -> Result<()> {
    if shadow.shape() != live.shape() {
        return Err(Error::Shape(format!("EMA shapes differ: {:?} vs {:?}", shadow.shape(), live.shape())));
    }
    for (s, l) in shadow.data_mut().iter_mut().zip(live.data()) {
        *s = decay * *s + (1.0 - decay) * l;
    }
    Ok(())
}

/// Shadow copy of a tensor list.
#[derive(Clone, Debug, PartialEq)]
pub struct Ema {
    decay: f64,
    shadow: Vec<Tensor>,
}

impl Ema {
    pub fn new<'a>(live: impl IntoIterator<Item = &'a Tensor>, decay: f64) -> Self {
        Self {
            decay,
            shadow: live.into_iter().cloned().collect(),
        }
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn shadow(&self) -> &[Tensor] {
        &self.shadow
    }

    pub fn restore(&mut self, shadow: Vec<Tensor>) -> Result<()> {
        if shadow.len() != self.shadow.len() || shadow.iter().zip(&self.shadow).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::Shape("EMA state does not match the parameters".into()));
        }
        self.shadow = shadow;
        Ok(())
    }

    pub fn update<'a>(&mut self, live: impl IntoIterator<Item = &'a Tensor>) -> Result<()> {
        let mut n = 0;
        for (s, l) in self.shadow.iter_mut().zip(live) {
            ema_update(s, l, self.decay)?;
            n += 1;
        }
        if n != self.shadow.len() {
            return Err(Error::Shape("EMA update with too few tensors".into()));
        }
        Ok(())
    }
}
