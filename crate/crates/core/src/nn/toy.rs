//! Deterministic toy-model generator. Weights come from a single SplitMix64
//! stream so the same seed produces bit-identical models (and therefore
//! byte-identical weight files) in any implementation.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::float::Real;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

use super::{LayerSpec, LayerWeights, Model};

/// Named toy architectures. Both consume a 1-channel 16x16 image and emit
/// 10 class scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyArch {
    /// conv(4) -> relu -> maxpool(2,2) -> conv(8) -> relu -> flatten -> dense(10)
    Tiny,
    /// Doubled channels plus one extra conv block:
    /// conv(8) -> relu -> maxpool -> conv(16) -> relu -> maxpool -> conv(32) -> relu -> flatten -> dense(10)
    Small,
}

impl FromStr for ToyArch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(ToyArch::Tiny),
            "small" => Ok(ToyArch::Small),
            other => Err(Error::UnknownArch(other.into())),
        }
    }
}

impl ToyArch {
    pub fn name(&self) -> &'static str {
        match self {
            ToyArch::Tiny => "tiny",
            ToyArch::Small => "small",
        }
    }

    fn layers(&self) -> (Vec<LayerSpec>, Vec<usize>) {
        let conv = |out, inp| LayerSpec::Conv2d {
            out_channels: out,
            in_channels: inp,
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            padding: 1,
        };
        let pool = LayerSpec::Maxpool { window: 2, stride: 2 };
        match self {
            ToyArch::Tiny => (
                vec![
                    conv(4, 1),
                    LayerSpec::Relu,
                    pool,
                    conv(8, 4),
                    LayerSpec::Relu,
                    LayerSpec::Flatten,
                    LayerSpec::Dense { out_features: 10, in_features: 8 * 8 * 8 },
                ],
                vec![1, 16, 16],
            ),
            ToyArch::Small => (
                vec![
                    conv(8, 1),
                    LayerSpec::Relu,
                    pool.clone(),
                    conv(16, 8),
                    LayerSpec::Relu,
                    pool,
                    conv(32, 16),
                    LayerSpec::Relu,
                    LayerSpec::Flatten,
                    LayerSpec::Dense { out_features: 10, in_features: 32 * 4 * 4 },
                ],
                vec![1, 16, 16],
            ),
        }
    }
}

/// Generates a toy model. Every weight and bias value is drawn in
/// declaration order (kernel first, then bias, layer by layer) as
/// `uniform[-0.5, 0.5) / sqrt(fan_in)` from one SplitMix64 stream; draws are
/// evaluated in `f64` and rounded to the target precision afterwards.
pub fn generate_toy_model<T: Real>(seed: u64, arch: ToyArch) -> Model<T> {
    let (layers, input_shape) = arch.layers();
    let mut rng = SplitMix64::new(seed);
    let mut weights: Vec<Option<LayerWeights<f64>>> = Vec::with_capacity(layers.len());
    for layer in &layers {
        match layer.weight_shapes() {
            Some((kernel_shape, bias_shape)) => {
                let fan_in: usize = match layer {
                    LayerSpec::Conv2d { in_channels, kernel_h, kernel_w, .. } => {
                        in_channels * kernel_h * kernel_w
                    }
                    LayerSpec::Dense { in_features, .. } => *in_features,
                    _ => unreachable!(),
                };
                let scale = 1.0 / (fan_in as f64).sqrt();
                let mut draw = |n: usize| -> Vec<f64> {
                    (0..n).map(|_| rng.next_centered() * scale).collect()
                };
                let kn = kernel_shape.iter().product();
                let bn = bias_shape.iter().product();
                let kernel = Tensor::from_vec(kernel_shape, draw(kn)).unwrap();
                let bias = Tensor::from_vec(bias_shape, draw(bn)).unwrap();
                weights.push(Some(LayerWeights { kernel, bias }));
            }
            None => weights.push(None),
        }
    }
    let model = Model::new(layers, weights, input_shape).expect("toy architecture is valid");
    model.cast()
}

/// Deterministic synthetic image matching `shape`, pixels drawn as
/// `k / 255` with `k` uniform in `0..=255`. Mirrors what an 8-bit image
/// file would decode to.
pub fn synth_image<T: Real>(seed: u64, shape: &[usize]) -> Tensor<T> {
    let mut rng = SplitMix64::new(seed);
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::from_f64_rn((rng.next_u64() >> 56) as f64 / 255.0))
        .collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}
