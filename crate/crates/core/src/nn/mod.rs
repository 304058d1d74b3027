//! Minimal sequential CNN: forward pass with full activation caching and
//! hand-written per-layer backpropagation of one scalar score to any
//! intermediate feature layer. No training, no batching, no autodiff tape —
//! reverse accumulation over a layer list is all the attribution methods need
//! and it stays easy to verify against finite differences.

mod format;
mod toy;

pub use format::{load_model, save_model};
pub use toy::{generate_toy_model, synth_image, ToyArch};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Real;
use crate::tensor::Tensor;

/// One layer of a sequential model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    Maxpool {
        window: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        out_features: usize,
        in_features: usize,
    },
}

impl LayerSpec {
    pub fn is_parameterized(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. })
    }

    fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Conv2d { out_channels, in_channels, kernel_h, kernel_w, stride, .. } => {
                if out_channels == 0 || in_channels == 0 || kernel_h == 0 || kernel_w == 0 {
                    return Err(Error::InvalidLayer("conv2d dimensions must be positive".into()));
                }
                if stride == 0 {
                    return Err(Error::InvalidLayer("conv2d stride must be >= 1".into()));
                }
            }
            LayerSpec::Maxpool { window, stride } => {
                if window == 0 || stride == 0 {
                    return Err(Error::InvalidLayer("maxpool window and stride must be >= 1".into()));
                }
            }
            LayerSpec::Dense { out_features, in_features } => {
                if out_features == 0 || in_features == 0 {
                    return Err(Error::InvalidLayer("dense dimensions must be positive".into()));
                }
            }
            LayerSpec::Relu | LayerSpec::Flatten => {}
        }
        Ok(())
    }

    /// Shapes of (kernel, bias) for parameterized layers.
    pub fn weight_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Conv2d { out_channels, in_channels, kernel_h, kernel_w, .. } => {
                Some((vec![out_channels, in_channels, kernel_h, kernel_w], vec![out_channels]))
            }
            LayerSpec::Dense { out_features, in_features } => {
                Some((vec![out_features, in_features], vec![out_features]))
            }
            _ => None,
        }
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let spatial_err = || Error::InvalidShape {
            shape: input.to_vec(),
            reason: format!("{:?} expects rank-3 [channels, height, width] input", self),
        };
        match *self {
            LayerSpec::Conv2d { out_channels, in_channels, kernel_h, kernel_w, stride, padding } => {
                if input.len() != 3 {
                    return Err(spatial_err());
                }
                let (c, h, w) = (input[0], input[1], input[2]);
                if c != in_channels {
                    return Err(Error::InvalidShape {
                        shape: input.to_vec(),
                        reason: format!("conv2d expects {} input channels", in_channels),
                    });
                }
                if h + 2 * padding < kernel_h || w + 2 * padding < kernel_w {
                    return Err(Error::InvalidShape {
                        shape: input.to_vec(),
                        reason: "conv2d kernel larger than padded input".into(),
                    });
                }
                let oh = (h + 2 * padding - kernel_h) / stride + 1;
                let ow = (w + 2 * padding - kernel_w) / stride + 1;
                Ok(vec![out_channels, oh, ow])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Maxpool { window, stride } => {
                if input.len() != 3 {
                    return Err(spatial_err());
                }
                let (c, h, w) = (input[0], input[1], input[2]);
                if h < window || w < window {
                    return Err(Error::InvalidShape {
                        shape: input.to_vec(),
                        reason: "maxpool window larger than input".into(),
                    });
                }
                Ok(vec![c, (h - window) / stride + 1, (w - window) / stride + 1])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Dense { out_features, in_features } => {
                if input != [in_features] {
                    return Err(Error::InvalidShape {
                        shape: input.to_vec(),
                        reason: format!("dense expects rank-1 input of {} features", in_features),
                    });
                }
                Ok(vec![out_features])
            }
        }
    }
}

/// Kernel (or dense weight matrix) plus bias for one parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Sequential model: layer list, per-layer weights, and the input shape it
/// consumes. Immutable after construction; many forward/backward evaluations
/// may run concurrently against one shared model.
#[derive(Debug, Clone)]
pub struct Model<T> {
    layers: Vec<LayerSpec>,
    weights: Vec<Option<LayerWeights<T>>>,
    input_shape: Vec<usize>,
    output_shapes: Vec<Vec<usize>>,
}

/// Which score the gradient is taken of: the raw class score or the
/// softmax probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreMode {
    PreSoftmax,
    PostSoftmax,
}

/// Scalar network output to differentiate: a class index plus score mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoreSpec {
    pub class_index: usize,
    pub mode: ScoreMode,
}

/// Forward pass with every intermediate activation retained.
/// `activations[i]` is the output of layer `i` and exactly the input
/// consumed by layer `i + 1`.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    pub input: Tensor<T>,
    pub activations: Vec<Tensor<T>>,
    pub pre_softmax: Vec<T>,
    pub post_softmax: Vec<T>,
}

impl<T: Real> ForwardTrace<T> {
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.post_softmax.iter().enumerate() {
            if v > self.post_softmax[best] {
                best = i;
            }
        }
        best
    }

    pub fn score(&self, spec: ScoreSpec) -> T {
        match spec.mode {
            ScoreMode::PreSoftmax => self.pre_softmax[spec.class_index],
            ScoreMode::PostSoftmax => self.post_softmax[spec.class_index],
        }
    }
}

/// Numerically stable softmax (max subtraction).
pub fn softmax<T: Real>(scores: &[T]) -> Vec<T> {
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl<T: Real> Model<T> {
    /// Builds and validates a model: weight tensors must match each layer's
    /// declared shapes and consecutive layer shapes must compose, ending in a
    /// rank-1 score vector.
    pub fn new(
        layers: Vec<LayerSpec>,
        weights: Vec<Option<LayerWeights<T>>>,
        input_shape: Vec<usize>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("model has no layers".into()));
        }
        if weights.len() != layers.len() {
            return Err(Error::InvalidLayer(format!(
                "{} weight slots for {} layers",
                weights.len(),
                layers.len()
            )));
        }
        let mut output_shapes = Vec::with_capacity(layers.len());
        let mut shape = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            layer.validate()?;
            match (layer.weight_shapes(), &weights[i]) {
                (Some((k, b)), Some(w)) => {
                    if w.kernel.shape() != k.as_slice() || w.bias.shape() != b.as_slice() {
                        return Err(Error::InvalidLayer(format!(
                            "layer {} weight shapes {:?}/{:?} do not match declared {:?}/{:?}",
                            i,
                            w.kernel.shape(),
                            w.bias.shape(),
                            k,
                            b
                        )));
                    }
                }
                (None, None) => {}
                (Some(_), None) => {
                    return Err(Error::InvalidLayer(format!("layer {} is missing weights", i)))
                }
                (None, Some(_)) => {
                    return Err(Error::InvalidLayer(format!("layer {} takes no weights", i)))
                }
            }
            shape = layer.output_shape(&shape)?;
            output_shapes.push(shape.clone());
        }
        if shape.len() != 1 {
            return Err(Error::InvalidShape {
                shape,
                reason: "final layer must produce a rank-1 score vector".into(),
            });
        }
        Ok(Model { layers, weights, input_shape, output_shapes })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn weights(&self) -> &[Option<LayerWeights<T>>] {
        &self.weights
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Output shape of each layer, in order.
    pub fn output_shapes(&self) -> &[Vec<usize>] {
        &self.output_shapes
    }

    pub fn class_count(&self) -> usize {
        self.output_shapes.last().unwrap()[0]
    }

    /// Index of the last layer whose output is a spatial feature map, the
    /// default attribution target.
    pub fn last_spatial_layer(&self) -> Option<usize> {
        (0..self.layers.len()).rev().find(|&i| self.output_shapes[i].len() == 3)
    }

    pub fn check_class(&self, class_index: usize) -> Result<()> {
        if class_index >= self.class_count() {
            return Err(Error::ClassOutOfRange { index: class_index, count: self.class_count() });
        }
        Ok(())
    }

    fn check_layer(&self, layer_index: usize) -> Result<()> {
        if layer_index >= self.layers.len() {
            return Err(Error::LayerOutOfRange { index: layer_index, count: self.layers.len() });
        }
        Ok(())
    }

    /// Converts element precision, rounding to nearest.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            layers: self.layers.clone(),
            weights: self
                .weights
                .iter()
                .map(|w| {
                    w.as_ref()
                        .map(|lw| LayerWeights { kernel: lw.kernel.cast(), bias: lw.bias.cast() })
                })
                .collect(),
            input_shape: self.input_shape.clone(),
            output_shapes: self.output_shapes.clone(),
        }
    }

    /// Full forward pass caching every activation.
    pub fn forward(&self, image: &Tensor<T>) -> Result<ForwardTrace<T>> {
        if image.shape() != self.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                left: image.shape().to_vec(),
                right: self.input_shape.clone(),
            });
        }
        if !image.all_finite() {
            return Err(Error::NonFinite("model input".into()));
        }
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut current = image;
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer_forward(layer, self.weights[i].as_ref(), current)?;
            activations.push(out);
            current = activations.last().unwrap();
        }
        let pre_softmax = activations.last().unwrap().data().to_vec();
        let post_softmax = softmax(&pre_softmax);
        Ok(ForwardTrace { input: image.clone(), activations, pre_softmax, post_softmax })
    }

    /// Gradient of the selected score with respect to the output of
    /// `layer_index`, which must be a spatial (rank-3) feature map. In
    /// post-softmax mode the softmax Jacobian row is applied analytically.
    pub fn backward_to_layer(
        &self,
        trace: &ForwardTrace<T>,
        score: ScoreSpec,
        layer_index: usize,
    ) -> Result<Tensor<T>> {
        self.check_layer(layer_index)?;
        if self.output_shapes[layer_index].len() != 3 {
            return Err(Error::NonSpatialLayer { index: layer_index });
        }
        self.backprop(trace, score, layer_index + 1)
    }

    /// Gradient of the selected score with respect to the model input.
    pub fn backward_to_input(&self, trace: &ForwardTrace<T>, score: ScoreSpec) -> Result<Tensor<T>> {
        self.backprop(trace, score, 0)
    }

    /// Backpropagates the score gradient down to the input of layer
    /// `stop_layer` (i.e. the output of layer `stop_layer - 1`).
    fn backprop(&self, trace: &ForwardTrace<T>, score: ScoreSpec, stop_layer: usize) -> Result<Tensor<T>> {
        self.check_class(score.class_index)?;
        let seed = self.score_seed(trace, score);
        let mut grad = Tensor::from_vec(self.output_shapes.last().unwrap().clone(), seed)?;
        for i in (stop_layer..self.layers.len()).rev() {
            let input = if i == 0 { &trace.input } else { &trace.activations[i - 1] };
            grad = layer_backward(&self.layers[i], self.weights[i].as_ref(), input, &grad);
        }
        Ok(grad)
    }

    /// Gradient of the score with respect to the raw class scores.
    fn score_seed(&self, trace: &ForwardTrace<T>, score: ScoreSpec) -> Vec<T> {
        let classes = self.class_count();
        let c = score.class_index;
        match score.mode {
            ScoreMode::PreSoftmax => {
                let mut seed = vec![T::zero(); classes];
                seed[c] = T::one();
                seed
            }
            ScoreMode::PostSoftmax => {
                // d p_c / d s_j = p_c (delta_cj - p_j)
                let p = &trace.post_softmax;
                (0..classes)
                    .map(|j| {
                        let delta = if j == c { T::one() } else { T::zero() };
                        p[c] * (delta - p[j])
                    })
                    .collect()
            }
        }
    }

    /// Runs only the layers after `layer_index` on a replacement activation
    /// and returns the resulting trace tail (scores and softmax included).
    /// This is what finite-difference probes of intermediate units use.
    pub fn forward_from(&self, layer_index: usize, activation: &Tensor<T>) -> Result<TailTrace<T>> {
        self.check_layer(layer_index)?;
        if activation.shape() != self.output_shapes[layer_index].as_slice() {
            return Err(Error::ShapeMismatch {
                left: activation.shape().to_vec(),
                right: self.output_shapes[layer_index].clone(),
            });
        }
        let mut activations = Vec::new();
        let mut current = activation;
        for i in layer_index + 1..self.layers.len() {
            let out = layer_forward(&self.layers[i], self.weights[i].as_ref(), current)?;
            activations.push(out);
            current = activations.last().unwrap();
        }
        let pre_softmax = if let Some(last) = activations.last() {
            last.data().to_vec()
        } else {
            activation.data().to_vec()
        };
        let post_softmax = softmax(&pre_softmax);
        Ok(TailTrace { start: layer_index, input: activation.clone(), activations, pre_softmax, post_softmax })
    }

    /// Gradient of the selected score with respect to a replacement
    /// activation at `layer_index`, backpropagating through the tail only.
    pub fn grad_from_activation(
        &self,
        layer_index: usize,
        activation: &Tensor<T>,
        score: ScoreSpec,
    ) -> Result<Tensor<T>> {
        let tail = self.forward_from(layer_index, activation)?;
        self.check_class(score.class_index)?;
        let classes = self.class_count();
        let c = score.class_index;
        let seed = match score.mode {
            ScoreMode::PreSoftmax => {
                let mut s = vec![T::zero(); classes];
                s[c] = T::one();
                s
            }
            ScoreMode::PostSoftmax => {
                let p = &tail.post_softmax;
                (0..classes)
                    .map(|j| {
                        let delta = if j == c { T::one() } else { T::zero() };
                        p[c] * (delta - p[j])
                    })
                    .collect()
            }
        };
        let mut grad = Tensor::from_vec(self.output_shapes.last().unwrap().clone(), seed)?;
        for i in (layer_index + 1..self.layers.len()).rev() {
            let input = if i == layer_index + 1 {
                &tail.input
            } else {
                &tail.activations[i - layer_index - 2]
            };
            grad = layer_backward(&self.layers[i], self.weights[i].as_ref(), input, &grad);
        }
        Ok(grad)
    }
}

/// Trace of the layers after a replacement activation.
#[derive(Debug, Clone)]
pub struct TailTrace<T> {
    pub start: usize,
    pub input: Tensor<T>,
    pub activations: Vec<Tensor<T>>,
    pub pre_softmax: Vec<T>,
    pub post_softmax: Vec<T>,
}

impl<T: Real> TailTrace<T> {
    pub fn score(&self, spec: ScoreSpec) -> T {
        match spec.mode {
            ScoreMode::PreSoftmax => self.pre_softmax[spec.class_index],
            ScoreMode::PostSoftmax => self.post_softmax[spec.class_index],
        }
    }
}

fn layer_forward<T: Real>(
    spec: &LayerSpec,
    weights: Option<&LayerWeights<T>>,
    input: &Tensor<T>,
) -> Result<Tensor<T>> {
    let out_shape = spec.output_shape(input.shape())?;
    match *spec {
        LayerSpec::Conv2d { out_channels, in_channels, kernel_h, kernel_w, stride, padding } => {
            let w = weights.unwrap();
            let (h, width) = (input.shape()[1], input.shape()[2]);
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let kd = w.kernel.data();
            let bd = w.bias.data();
            let id = input.data();
            let mut out = vec![T::zero(); out_channels * oh * ow];
            for o in 0..out_channels {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = bd[o];
                        for ic in 0..in_channels {
                            for ky in 0..kernel_h {
                                let iy = (y * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kernel_w {
                                    let ix = (x * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= width as isize {
                                        continue;
                                    }
                                    let iv = id[(ic * h + iy as usize) * width + ix as usize];
                                    let kv = kd[((o * in_channels + ic) * kernel_h + ky) * kernel_w + kx];
                                    acc += iv * kv;
                                }
                            }
                        }
                        out[(o * oh + y) * ow + x] = acc;
                    }
                }
            }
            Tensor::from_vec(out_shape, out)
        }
        LayerSpec::Relu => Ok(input.relu()),
        LayerSpec::Maxpool { window, stride } => {
            let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let id = input.data();
            let mut out = vec![T::zero(); c * oh * ow];
            for ch in 0..c {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut best = T::neg_infinity();
                        for wy in 0..window {
                            for wx in 0..window {
                                let v = id[(ch * h + y * stride + wy) * w + x * stride + wx];
                                if v > best {
                                    best = v;
                                }
                            }
                        }
                        out[(ch * oh + y) * ow + x] = best;
                    }
                }
            }
            Tensor::from_vec(out_shape, out)
        }
        LayerSpec::Flatten => input.reshape(out_shape),
        LayerSpec::Dense { out_features, in_features } => {
            let w = weights.unwrap();
            let kd = w.kernel.data();
            let bd = w.bias.data();
            let id = input.data();
            let mut out = vec![T::zero(); out_features];
            for (o, slot) in out.iter_mut().enumerate() {
                let mut acc = bd[o];
                let row = &kd[o * in_features..(o + 1) * in_features];
                for (i, &v) in id.iter().enumerate() {
                    acc += row[i] * v;
                }
                *slot = acc;
            }
            Tensor::from_vec(out_shape, out)
        }
    }
}

/// Gradient of the layer output with respect to its input, chained onto
/// `grad_out`. `input` is the activation the layer consumed in the forward
/// pass; it is needed for the ReLU mask and the maxpool argmax.
fn layer_backward<T: Real>(
    spec: &LayerSpec,
    weights: Option<&LayerWeights<T>>,
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    match *spec {
        LayerSpec::Conv2d { out_channels, in_channels, kernel_h, kernel_w, stride, padding } => {
            let w = weights.unwrap();
            let (h, width) = (input.shape()[1], input.shape()[2]);
            let (oh, ow) = (grad_out.shape()[1], grad_out.shape()[2]);
            let kd = w.kernel.data();
            let gd = grad_out.data();
            let mut gin = vec![T::zero(); input.len()];
            for o in 0..out_channels {
                for y in 0..oh {
                    for x in 0..ow {
                        let g = gd[(o * oh + y) * ow + x];
                        if g == T::zero() {
                            continue;
                        }
                        for ic in 0..in_channels {
                            for ky in 0..kernel_h {
                                let iy = (y * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kernel_w {
                                    let ix = (x * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= width as isize {
                                        continue;
                                    }
                                    let kv = kd[((o * in_channels + ic) * kernel_h + ky) * kernel_w + kx];
                                    gin[(ic * h + iy as usize) * width + ix as usize] += g * kv;
                                }
                            }
                        }
                    }
                }
            }
            Tensor::from_vec(input.shape().to_vec(), gin).unwrap()
        }
        LayerSpec::Relu => {
            // Derivative at exactly zero is taken as zero.
            let data = input
                .data()
                .iter()
                .zip(grad_out.data())
                .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                .collect();
            Tensor::from_vec(input.shape().to_vec(), data).unwrap()
        }
        LayerSpec::Maxpool { window, stride } => {
            let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
            let (oh, ow) = (grad_out.shape()[1], grad_out.shape()[2]);
            let id = input.data();
            let gd = grad_out.data();
            let mut gin = vec![T::zero(); input.len()];
            for ch in 0..c {
                for y in 0..oh {
                    for x in 0..ow {
                        // Ties break to the first maximal element in scan
                        // order so results reproduce across implementations.
                        let mut best = T::neg_infinity();
                        let mut best_off = 0;
                        for wy in 0..window {
                            for wx in 0..window {
                                let off = (ch * h + y * stride + wy) * w + x * stride + wx;
                                if id[off] > best {
                                    best = id[off];
                                    best_off = off;
                                }
                            }
                        }
                        gin[best_off] += gd[(ch * oh + y) * ow + x];
                    }
                }
            }
            Tensor::from_vec(input.shape().to_vec(), gin).unwrap()
        }
        LayerSpec::Flatten => grad_out.reshape(input.shape().to_vec()).unwrap(),
        LayerSpec::Dense { out_features, in_features } => {
            let w = weights.unwrap();
            let kd = w.kernel.data();
            let gd = grad_out.data();
            let mut gin = vec![T::zero(); in_features];
            for o in 0..out_features {
                let g = gd[o];
                if g == T::zero() {
                    continue;
                }
                let row = &kd[o * in_features..(o + 1) * in_features];
                for (i, slot) in gin.iter_mut().enumerate() {
                    *slot += g * row[i];
                }
            }
            Tensor::from_vec(input.shape().to_vec(), gin).unwrap()
        }
    }
}
