//! Counter-based random streams. Every consumer derives its generator from
//! `(seed, domain, index)`, so the draws of one consumer never depend on how
//! many values another consumer took.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Init,
    Data,
    Noise,
    Dropout,
    Sweep,
    Sample,
    Eval,
}

impl Domain {
    fn salt(self) -> u64 {
        match self {
            Domain::Init => 0x1b87_3593_ed55_8c3d,
            Domain::Data => 0x2545_f491_4f6c_dd1d,
            Domain::Noise => 0x9e37_79b9_7f4a_7c15,
            Domain::Dropout => 0xc2b2_ae3d_27d4_eb4f,
            Domain::Sweep => 0x1656_67b1_9e37_79f9,
            Domain::Sample => 0x85eb_ca77_c2b2_ae63,
            Domain::Eval => 0x27d4_eb2f_1656_67c5,
        }
    }
}

/// Generator for item `index` of `domain` under `seed`.
pub fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.salt());
    rng.set_stream(index);
    rng
}

/// Tensor of independent standard normal draws.
pub fn normal_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}
