//! Synthetic datasets. Every generator is a pure function of its random
//! stream.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    /// Eight Gaussians evenly spaced on a circle.
    Gauss8,
    TwoMoons,
    Checkerboard,
    /// Single-channel square images holding one Gaussian bump.
    BlobImages,
    /// One isotropic Gaussian `N(mean·𝟙, var·I)`.
    Gaussian,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 5] = [
        DatasetKind::Gauss8,
        DatasetKind::TwoMoons,
        DatasetKind::Checkerboard,
        DatasetKind::BlobImages,
        DatasetKind::Gaussian,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Gauss8 => "gauss8",
            DatasetKind::TwoMoons => "two_moons",
            DatasetKind::Checkerboard => "checkerboard",
            DatasetKind::BlobImages => "blob_images",
            DatasetKind::Gaussian => "gaussian",
        }
    }

    pub fn is_image(self) -> bool {
        self == DatasetKind::BlobImages
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown dataset '{}' (expected gauss8|two_moons|checkerboard|blob_images|gaussian)",
                    s
                ))
            })
    }
}

/// A dataset kind with its generator parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Component standard deviation for `gauss8`.
    pub gauss8_std: f64,
    /// Side length for `blob_images`.
    pub image_size: usize,
    /// Dimension, per-coordinate mean and variance for `gaussian`.
    pub gaussian_dim: usize,
    pub gaussian_mean: f64,
    pub gaussian_var: f64,
}

impl DatasetSpec {
    pub fn new(kind: DatasetKind) -> Self {
        Self {
            kind,
            gauss8_std: 0.05,
            image_size: 8,
            gaussian_dim: 2,
            gaussian_mean: 0.0,
            gaussian_var: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gauss8_std >= 0.0) {
            return Err(Error::Config("gauss8_std must be ≥ 0".into()));
        }
        if self.image_size < 2 || self.image_size % 2 != 0 {
            return Err(Error::Config("image_size must be even and ≥ 2".into()));
        }
        if self.gaussian_dim == 0 || !(self.gaussian_var >= 0.0) || !self.gaussian_mean.is_finite() {
            return Err(Error::Config("gaussian needs dim ≥ 1, var ≥ 0 and a finite mean".into()));
        }
        Ok(())
    }

    /// Shape of one sample.
    pub fn sample_shape(&self) -> Vec<usize> {
        match self.kind {
            DatasetKind::BlobImages => vec![1, self.image_size, self.image_size],
            DatasetKind::Gaussian => vec![self.gaussian_dim],
            _ => vec![2],
        }
    }

    /// `n` samples stacked along a leading axis.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let shape = self.sample_shape();
        let per: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n * per);
        for _ in 0..n {
            match self.kind {
                DatasetKind::Gauss8 => data.extend(gauss8_point(self.gauss8_std, rng)),
                DatasetKind::TwoMoons => data.extend(two_moons_point(rng)),
                DatasetKind::Checkerboard => data.extend(checkerboard_point(rng)),
                DatasetKind::BlobImages => data.extend(blob_image(self.image_size, rng)),
                DatasetKind::Gaussian => {
                    let sd = self.gaussian_var.sqrt();
                    data.extend((0..per).map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        self.gaussian_mean + sd * z
                    }))
                }
            }
        }
        let mut full = vec![n];
        full.extend(shape);
        Tensor::new(full, data).expect("sample count matches shape")
    }
}

/// `n` samples of `kind` with default parameters from `seed`.
pub fn make_dataset(kind: DatasetKind, n: usize, seed: u64) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::Config("dataset size must be positive".into()));
    }
    Ok(DatasetSpec::new(kind).sample(n, &mut ChaCha8Rng::seed_from_u64(seed)))
}

/// Centers of the eight `gauss8` components, counter-clockwise from `(1, 0)`.
pub fn gauss8_centers() -> Vec<[f64; 2]> {
    (0..8)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / 8.0;
            [a.cos(), a.sin()]
        })
        .collect()
}

fn gauss8_point(std: f64, rng: &mut ChaCha8Rng) -> [f64; 2] {
    let c = gauss8_centers()[rng.gen_range(0..8)];
    let (zx, zy): (f64, f64) = (StandardNormal.sample(rng), StandardNormal.sample(rng));
    [c[0] + std * zx, c[1] + std * zy]
}

const MOONS_NOISE: f64 = 0.05;

/// Two interleaved half circles with Gaussian jitter, centered and scaled
/// to unit per-coordinate variance on average.
fn two_moons_point(rng: &mut ChaCha8Rng) -> [f64; 2] {
    let a = rng.gen_range(0.0..PI);
    let (x, y) = if rng.gen_bool(0.5) {
        (a.cos(), a.sin())
    } else {
        (1.0 - a.cos(), 0.5 - a.sin())
    };
    let (zx, zy): (f64, f64) = (StandardNormal.sample(rng), StandardNormal.sample(rng));
    // Mixture moments: mean (1/2, 1/4); variances 3/4 and 9/16 − 1/π.
    let var_x = 0.75 + MOONS_NOISE * MOONS_NOISE;
    let var_y = 0.5625 - 1.0 / PI + MOONS_NOISE * MOONS_NOISE;
    let scale = ((var_x + var_y) / 2.0).sqrt();
    [(x + MOONS_NOISE * zx - 0.5) / scale, (y + MOONS_NOISE * zy - 0.25) / scale]
}

/// Uniform on the dark squares of a 4×4 board over `[−2, 2]²`, scaled to
/// unit variance.
fn checkerboard_point(rng: &mut ChaCha8Rng) -> [f64; 2] {
    let x: f64 = rng.gen_range(-2.0..2.0);
    let y0 = rng.gen_range(0.0..1.0) - 2.0 * f64::from(rng.gen_range(0u8..2));
    let y = y0 + x.floor().rem_euclid(2.0);
    let scale = (4.0f64 / 3.0).sqrt();
    [x / scale, y / scale]
}

const BLOB_WIDTH: f64 = 1.0;

fn raw_blob(size: usize, cx: f64, cy: f64) -> Vec<f64> {
    let mut img = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            img.push((-d2 / (2.0 * BLOB_WIDTH * BLOB_WIDTH)).exp());
        }
    }
    img
}

/// Pixel mean and standard deviation of raw blobs, estimated once from a
/// fixed reference draw.
fn blob_moments(size: usize) -> (f64, f64) {
    static CACHE: OnceLock<std::sync::Mutex<Vec<(usize, (f64, f64))>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let mut guard = cache.lock().expect("blob moment cache");
    if let Some((_, m)) = guard.iter().find(|(s, _)| *s == size) {
        return *m;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x0b10b);
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut count = 0.0;
    for _ in 0..4096 {
        let (cx, cy) = blob_center(size, &mut rng);
        for v in raw_blob(size, cx, cy) {
            sum += v;
            sq += v * v;
            count += 1.0;
        }
    }
    let mean = sum / count;
    let m = (mean, (sq / count - mean * mean).sqrt());
    guard.push((size, m));
    m
}

fn blob_center(size: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let hi = size as f64 - 1.5;
    (rng.gen_range(1.5..hi.max(1.5 + 1e-9)), rng.gen_range(1.5..hi.max(1.5 + 1e-9)))
}

fn blob_image(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (mean, sd) = blob_moments(size);
    let (cx, cy) = blob_center(size, rng);
    raw_blob(size, cx, cy).into_iter().map(|v| (v - mean) / sd).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_width_gauss8_hits_centers() {
        let mut spec = DatasetSpec::new(DatasetKind::Gauss8);
        spec.gauss8_std = 0.0;
        let x = spec.sample(500, &mut ChaCha8Rng::seed_from_u64(1));
        let centers = gauss8_centers();
        for p in x.data().chunks(2) {
            assert!(centers.iter().any(|c| c[0] == p[0] && c[1] == p[1]));
        }
    }

    #[test]
    fn same_seed_same_samples() {
        for kind in DatasetKind::ALL {
            assert_eq!(make_dataset(kind, 64, 9).unwrap(), make_dataset(kind, 64, 9).unwrap());
            assert_ne!(make_dataset(kind, 64, 9).unwrap(), make_dataset(kind, 64, 10).unwrap());
        }
        assert!(make_dataset(DatasetKind::Gauss8, 0, 0).is_err());
        assert!(matches!("spiral".parse::<DatasetKind>(), Err(Error::Config(_))));
    }

    #[test]
    fn gauss8_mean_near_origin() {
        let x = make_dataset(DatasetKind::Gauss8, 10_000, 3).unwrap();
        let n = 10_000.0;
        let mx: f64 = x.data().iter().step_by(2).sum::<f64>() / n;
        let my: f64 = x.data().iter().skip(1).step_by(2).sum::<f64>() / n;
        assert!(mx.abs() < 0.02 && my.abs() < 0.02);
    }

    #[test]
    fn planar_sets_are_normalized() {
        for kind in [DatasetKind::TwoMoons, DatasetKind::Checkerboard] {
            let x = make_dataset(kind, 20_000, 4).unwrap();
            let n = 20_000.0;
            let mut var = 0.0;
            for d in 0..2 {
                let col: Vec<f64> = x.data().iter().skip(d).step_by(2).copied().collect();
                let m = col.iter().sum::<f64>() / n;
                assert!(m.abs() < 0.03, "{} mean {}", kind, m);
                var += col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            }
            assert!((var / 2.0 - 1.0).abs() < 0.03, "{} variance {}", kind, var / 2.0);
        }
    }

    #[test]
    fn checkerboard_avoids_light_squares() {
        let x = make_dataset(DatasetKind::Checkerboard, 2000, 5).unwrap();
        let s = (4.0f64 / 3.0).sqrt();
        for p in x.data().chunks(2) {
            let (cx, cy) = ((p[0] * s).floor() as i64, (p[1] * s).floor() as i64);
            assert_eq!((cx + cy).rem_euclid(2), 0);
        }
    }

    #[test]
    fn blob_images_are_normalized() {
        let x = make_dataset(DatasetKind::BlobImages, 2000, 6).unwrap();
        assert_eq!(x.shape(), &[2000, 1, 8, 8]);
        let n = x.len() as f64;
        let m = x.sum() / n;
        let var = x.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
        assert!(m.abs() < 0.05 && (var - 1.0).abs() < 0.1);
    }

    #[test]
    fn gaussian_moments() {
        let mut spec = DatasetSpec::new(DatasetKind::Gaussian);
        spec.gaussian_dim = 3;
        spec.gaussian_mean = 1.5;
        spec.gaussian_var = 0.25;
        let x = spec.sample(20_000, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(x.shape(), &[20_000, 3]);
        let n = x.len() as f64;
        let m = x.sum() / n;
        let var = x.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
        assert!((m - 1.5).abs() < 0.01 && (var - 0.25).abs() < 0.01);
    }
}
