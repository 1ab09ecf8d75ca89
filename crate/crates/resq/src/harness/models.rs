//! Randomly initialized toy convolution stacks for experiments.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::engine::{Layer, ModelSpec, Nonlinearity};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Build a `depth`-layer stack of same-padded convolutions with ReLUs between
/// them (none after the last). Weights are He-initialized: zero-mean Gaussian
/// with std `sqrt(2 / fan_in)`, drawn from a single seeded stream so the same
/// arguments always build the same model.
pub fn build_toy_model(
    depth: usize,
    input_channels: usize,
    width: usize,
    kernel: usize,
    seed: u64,
) -> Result<ModelSpec> {
    if depth == 0 || input_channels == 0 || width == 0 {
        return Err(Error::Config(
            "toy model needs depth, input channels, and width >= 1".into(),
        ));
    }
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "toy model kernels must be odd so same padding works, got {kernel}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(depth);
    for l in 0..depth {
        let c_in = if l == 0 { input_channels } else { width };
        let fan_in = c_in * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt() as f32;
        let normal = Normal::new(0.0f32, std).expect("std is finite and positive");
        let n = width * c_in * kernel * kernel;
        let data: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let weights = Tensor::new(vec![width, c_in, kernel, kernel], data)?;
        let nonlinearity = if l + 1 < depth {
            Nonlinearity::Relu
        } else {
            Nonlinearity::None
        };
        layers.push(Layer::new(weights, kernel / 2, nonlinearity)?);
    }
    ModelSpec::new(layers)
}

/// A single 1x1 layer whose weights are the identity over channels and whose
/// nonlinearity is a no-op: the model output equals its input exactly, which
/// makes it handy for isolating quantization effects.
pub fn identity_model(channels: usize) -> Result<ModelSpec> {
    if channels == 0 {
        return Err(Error::Config("identity model needs at least one channel".into()));
    }
    let mut data = vec![0.0f32; channels * channels];
    for c in 0..channels {
        data[c * channels + c] = 1.0;
    }
    let weights = Tensor::new(vec![channels, channels, 1, 1], data)?;
    ModelSpec::new(vec![Layer::new(weights, 0, Nonlinearity::None)?])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{frame_forward, PrecisionMode, WhichParams};
    use rand::Rng;

    #[test]
    fn toy_model_has_expected_layout() {
        let m = build_toy_model(3, 2, 4, 3, 5).unwrap();
        assert_eq!(m.num_layers(), 3);
        assert_eq!(m.layers()[0].weights().shape(), &[4, 2, 3, 3]);
        assert_eq!(m.layers()[1].weights().shape(), &[4, 4, 3, 3]);
        assert_eq!(m.layers()[2].weights().shape(), &[4, 4, 3, 3]);
        for l in m.layers() {
            assert_eq!(l.padding(), 1, "same padding for 3x3 kernels");
        }
        assert_eq!(m.layers()[0].nonlinearity(), Nonlinearity::Relu);
        assert_eq!(m.layers()[1].nonlinearity(), Nonlinearity::Relu);
        assert_eq!(m.layers()[2].nonlinearity(), Nonlinearity::None);
        assert!(!m.is_calibrated());
    }

    #[test]
    fn weights_follow_he_scaling() {
        let m = build_toy_model(1, 16, 16, 3, 9).unwrap();
        let data = m.layers()[0].weights().data();
        let n = data.len() as f64;
        let mean: f64 = data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var: f64 = data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let expected = 2.0 / (16.0 * 9.0);
        assert!(
            (var / expected - 1.0).abs() < 0.15,
            "sample variance {var} vs He target {expected}"
        );
    }

    #[test]
    fn building_is_deterministic() {
        let a = build_toy_model(2, 3, 8, 3, 42).unwrap();
        let b = build_toy_model(2, 3, 8, 3, 42).unwrap();
        for (la, lb) in a.layers().iter().zip(b.layers()) {
            assert_eq!(la.weights().data(), lb.weights().data());
        }
        let c = build_toy_model(2, 3, 8, 3, 43).unwrap();
        assert_ne!(
            a.layers()[0].weights().data(),
            c.layers()[0].weights().data(),
            "different seeds give different weights"
        );
    }

    #[test]
    fn identity_model_returns_its_input() {
        let m = identity_model(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::new(
            vec![3, 5, 5],
            (0..75).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let y = frame_forward(&m, &x, WhichParams::Keyframe, PrecisionMode::FullPrecision)
            .unwrap();
        assert_eq!(y.data(), x.data(), "identity stack is exact");
    }

    #[test]
    fn rejects_even_kernels_and_empty_models() {
        assert!(build_toy_model(2, 3, 8, 2, 0).is_err(), "even kernel");
        assert!(build_toy_model(0, 3, 8, 3, 0).is_err(), "zero depth");
        assert!(identity_model(0).is_err());
    }
}
