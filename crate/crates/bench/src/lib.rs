//! Shared fixtures for the benchmarks.

use dpilab::networks::{ArchSpec, ModelSpec};
use dpilab::{InitScheme, LambdaMode, Scope, Strategy, Tensor};

/// Deterministic values in [-1, 1).
pub fn filled(shape: &[usize], salt: u64) -> Tensor {
    let mut state = salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    Tensor::from_fn(shape, |_| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 52) as f64 - 1.0
    })
}

pub fn mlp_spec(strategy: Strategy) -> ModelSpec {
    ModelSpec {
        arch: ArchSpec::Mlp { hidden: vec![128, 128, 128] },
        data_shape: vec![2],
        strategy,
        emb_dim: 32,
        scope: Scope::WEIGHTS,
        lambda_mode: LambdaMode::ExactEndpoint,
        grid_size: 1000,
        s_range: (0.0, 999.0),
        init_scheme: InitScheme::Independent,
        seed: 0,
    }
}

pub fn unet_spec(strategy: Strategy) -> ModelSpec {
    ModelSpec {
        arch: ArchSpec::UNet { width: 16, groups: 4 },
        data_shape: vec![1, 8, 8],
        emb_dim: 64,
        scope: Scope::ALL,
        ..mlp_spec(strategy)
    }
}
