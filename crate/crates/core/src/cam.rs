//! Grad-CAM, Grad-CAM+ (positive-gradient), and Grad-CAM++ attribution:
//! channel weights, per-unit alphas, and raw localization maps computed from
//! a forward trace and layer gradients.
//!
//! Two details are fixed here and relied on everywhere else:
//!
//! * Grad-CAM++ alphas are always computed from pre-softmax gradients of the
//!   class score, in the stable reciprocal form `1 / (2 + lambda * g * sumA)`
//!   with an exact-zero rule (`g == 0` gives alpha 0). The ReLU'd gradient
//!   factor inside the weight sum follows the request's score mode instead.
//! * No epsilon clamping happens unless asked for: alphas may get arbitrarily
//!   large (or non-finite when the denominator is exactly zero); such units
//!   are recorded in the diagnostics rather than silently repaired.

use crate::error::{Error, Result};
use crate::float::Real;
use crate::nn::{Model, ScoreMode, ScoreSpec};
use crate::tensor::{FeatureMapMeta, Tensor};

/// Attribution method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    GradCam,
    GradCamPlus,
    GradCamPP,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::GradCam => "gradcam",
            Method::GradCamPlus => "gradcam-plus",
            Method::GradCamPP => "gradcam-pp",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradcam" => Ok(Method::GradCam),
            "gradcam-plus" => Ok(Method::GradCamPlus),
            "gradcam-pp" => Ok(Method::GradCamPP),
            other => Err(Error::InvalidRequest(format!("unknown method `{other}`"))),
        }
    }
}

/// Full description of one attribution computation.
#[derive(Debug, Clone)]
pub struct AttributionRequest<T> {
    pub method: Method,
    pub layer_index: usize,
    pub score: ScoreSpec,
    /// Exponent generalization parameter; 1 recovers the standard formula.
    pub lambda: T,
    /// 0 disables denominator clamping (the faithful default). Positive
    /// values zero any alpha whose denominator magnitude falls below it and
    /// count the occurrences.
    pub alpha_epsilon: T,
    /// Replaces every nonzero alpha with a constant before the weight sum.
    /// Test hook for the near-equivalence analysis; not a CLI surface.
    pub alpha_override: Option<T>,
}

impl<T: Real> AttributionRequest<T> {
    pub fn new(method: Method, layer_index: usize, score: ScoreSpec) -> Self {
        AttributionRequest {
            method,
            layer_index,
            score,
            lambda: T::one(),
            alpha_epsilon: T::zero(),
            alpha_override: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.lambda <= T::zero() {
            return Err(Error::InvalidRequest("lambda must be positive".into()));
        }
        if self.alpha_epsilon < T::zero() {
            return Err(Error::InvalidRequest("alpha epsilon must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Per-channel combination weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelWeights<T> {
    pub values: Vec<T>,
}

/// Per-unit Grad-CAM++ importance factors plus the diagnostics the
/// statistics and audit paths need.
#[derive(Debug, Clone)]
pub struct AlphaField<T> {
    pub values: Tensor<T>,
    /// Running min/max over nonzero alphas (outliers included), if any.
    pub nonzero_min: Option<T>,
    pub nonzero_max: Option<T>,
    /// Units whose gradient was exactly zero (alpha assigned zero).
    pub zero_gradient_count: usize,
    /// Units zeroed by the epsilon clamp (only when alpha_epsilon > 0).
    pub clamped_count: usize,
    /// Units where the denominator was exactly zero with a nonzero gradient;
    /// their alphas are non-finite when clamping is off.
    pub non_finite_units: Vec<[usize; 3]>,
}

/// Raw (layer-resolution) localization map; nonnegative after the final ReLU.
#[derive(Debug, Clone)]
pub struct RawHeatmap<T> {
    pub values: Tensor<T>,
    pub source: AttributionRequest<T>,
}

/// Result of [`attribute`]: the map plus alpha diagnostics for Grad-CAM++.
#[derive(Debug, Clone)]
pub struct Attribution<T> {
    pub heatmap: RawHeatmap<T>,
    pub alphas: Option<AlphaField<T>>,
}

/// Grad-CAM weights: gradients globally average-pooled per feature map.
pub fn gradcam_weights<T: Real>(grads: &Tensor<T>) -> Result<ChannelWeights<T>> {
    let meta = FeatureMapMeta::from_shape(grads.shape())?;
    let z = T::from_usize(meta.size).unwrap();
    let values = map_sums(grads, &meta).into_iter().map(|s| s / z).collect();
    Ok(ChannelWeights { values })
}

/// Positive-gradient variant: only positive gradient terms enter the average.
pub fn gradcam_plus_weights<T: Real>(grads: &Tensor<T>) -> Result<ChannelWeights<T>> {
    let meta = FeatureMapMeta::from_shape(grads.shape())?;
    let z = T::from_usize(meta.size).unwrap();
    let d = grads.data();
    let values = (0..meta.maps)
        .map(|k| {
            let mut acc = T::zero();
            for &g in &d[k * meta.size..(k + 1) * meta.size] {
                if g > T::zero() {
                    acc += g;
                }
            }
            acc / z
        })
        .collect();
    Ok(ChannelWeights { values })
}

/// Grad-CAM++ alphas in the stable reciprocal form
/// `alpha = 1 / (2 + lambda * g * sum(A_k))`, with `alpha = 0` where the
/// (pre-softmax) gradient is exactly zero.
pub fn alpha_stable<T: Real>(
    grads_pre: &Tensor<T>,
    activations: &Tensor<T>,
    lambda: T,
    alpha_epsilon: T,
) -> Result<AlphaField<T>> {
    alpha_field(grads_pre, activations, |g, act_sum, diag, coords| {
        let denom = T::from_f64_rn(2.0) + lambda * g * act_sum;
        if alpha_epsilon > T::zero() && denom.abs() < alpha_epsilon {
            diag.clamped_count += 1;
            return T::zero();
        }
        if denom == T::zero() {
            diag.non_finite_units.push(coords);
        }
        T::one() / denom
    })
}

/// Grad-CAM++ alphas in the original second/third-power form
/// `alpha = g^2 / (2 g^2 + lambda * sum(A_k) * g^3)`, with the 0/0 rule at
/// `g == 0`. Mathematically equal to [`alpha_stable`], but the powers under-
/// and overflow much earlier, which is exactly what its tests demonstrate.
pub fn alpha_cubic<T: Real>(
    grads_pre: &Tensor<T>,
    activations: &Tensor<T>,
    lambda: T,
) -> Result<AlphaField<T>> {
    let two = T::from_f64_rn(2.0);
    alpha_field(grads_pre, activations, |g, act_sum, diag, coords| {
        let g2 = g * g;
        let denom = two * g2 + lambda * act_sum * (g2 * g);
        let alpha = g2 / denom;
        if !alpha.is_finite() {
            diag.non_finite_units.push(coords);
        }
        alpha
    })
}

fn alpha_field<T: Real>(
    grads: &Tensor<T>,
    activations: &Tensor<T>,
    mut unit: impl FnMut(T, T, &mut AlphaField<T>, [usize; 3]) -> T,
) -> Result<AlphaField<T>> {
    if grads.shape() != activations.shape() {
        return Err(Error::ShapeMismatch {
            left: grads.shape().to_vec(),
            right: activations.shape().to_vec(),
        });
    }
    let meta = FeatureMapMeta::from_shape(grads.shape())?;
    let sums = map_sums(activations, &meta);
    let mut field = AlphaField {
        values: Tensor::zeros(grads.shape().to_vec()),
        nonzero_min: None,
        nonzero_max: None,
        zero_gradient_count: 0,
        clamped_count: 0,
        non_finite_units: Vec::new(),
    };
    let gd = grads.data();
    let mut values = vec![T::zero(); gd.len()];
    for k in 0..meta.maps {
        for r in 0..meta.height {
            for c in 0..meta.width {
                let off = (k * meta.height + r) * meta.width + c;
                let g = gd[off];
                if g == T::zero() {
                    field.zero_gradient_count += 1;
                    continue;
                }
                let alpha = unit(g, sums[k], &mut field, [k, r, c]);
                values[off] = alpha;
                if alpha != T::zero() {
                    field.nonzero_min = Some(match field.nonzero_min {
                        Some(m) => m.min(alpha),
                        None => alpha,
                    });
                    field.nonzero_max = Some(match field.nonzero_max {
                        Some(m) => m.max(alpha),
                        None => alpha,
                    });
                }
            }
        }
    }
    field.values = Tensor::from_vec(grads.shape().to_vec(), values)?;
    Ok(field)
}

/// Grad-CAM++ weights: alpha-weighted sum of the positive gradient parts,
/// `w_k = sum_ij alpha[k,i,j] * max(g[k,i,j], 0)`.
pub fn gradcam_pp_weights<T: Real>(
    grads: &Tensor<T>,
    alphas: &AlphaField<T>,
) -> Result<ChannelWeights<T>> {
    if grads.shape() != alphas.values.shape() {
        return Err(Error::ShapeMismatch {
            left: grads.shape().to_vec(),
            right: alphas.values.shape().to_vec(),
        });
    }
    let meta = FeatureMapMeta::from_shape(grads.shape())?;
    let gd = grads.data();
    let ad = alphas.values.data();
    let values = (0..meta.maps)
        .map(|k| {
            let mut acc = T::zero();
            for off in k * meta.size..(k + 1) * meta.size {
                if gd[off] > T::zero() {
                    acc += ad[off] * gd[off];
                }
            }
            acc
        })
        .collect();
    Ok(ChannelWeights { values })
}

/// Combines feature maps with channel weights and applies the final ReLU:
/// `L = relu(sum_k w_k A^k)`, a 2-D map at layer resolution.
pub fn combine_maps<T: Real>(
    weights: &ChannelWeights<T>,
    activations: &Tensor<T>,
) -> Result<Tensor<T>> {
    let meta = FeatureMapMeta::from_shape(activations.shape())?;
    if weights.values.len() != meta.maps {
        return Err(Error::ShapeMismatch {
            left: vec![weights.values.len()],
            right: vec![meta.maps],
        });
    }
    let ad = activations.data();
    let mut out = vec![T::zero(); meta.size];
    for (k, &w) in weights.values.iter().enumerate() {
        if w == T::zero() {
            continue;
        }
        for (slot, &a) in out.iter_mut().zip(&ad[k * meta.size..(k + 1) * meta.size]) {
            *slot += w * a;
        }
    }
    for v in &mut out {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    Tensor::from_vec(vec![meta.height, meta.width], out)
}

/// Runs the full attribution pipeline for one image and request.
pub fn attribute<T: Real>(
    model: &Model<T>,
    image: &Tensor<T>,
    request: &AttributionRequest<T>,
) -> Result<Attribution<T>> {
    request.validate()?;
    model.check_class(request.score.class_index)?;
    let trace = model.forward(image)?;
    attribute_from_trace(model, &trace, request)
}

/// Same as [`attribute`] but reuses an existing forward trace.
pub fn attribute_from_trace<T: Real>(
    model: &Model<T>,
    trace: &crate::nn::ForwardTrace<T>,
    request: &AttributionRequest<T>,
) -> Result<Attribution<T>> {
    request.validate()?;
    let layer = request.layer_index;
    let grads_mode = model.backward_to_layer(trace, request.score, layer)?;
    let activations = &trace.activations[layer];

    let (weights, alphas) = match request.method {
        Method::GradCam => (gradcam_weights(&grads_mode)?, None),
        Method::GradCamPlus => (gradcam_plus_weights(&grads_mode)?, None),
        Method::GradCamPP => {
            // Alphas use pre-softmax gradients of the class score no matter
            // the requested score mode.
            let grads_pre = if request.score.mode == ScoreMode::PreSoftmax {
                grads_mode.clone()
            } else {
                let pre = ScoreSpec { class_index: request.score.class_index, mode: ScoreMode::PreSoftmax };
                model.backward_to_layer(trace, pre, layer)?
            };
            let mut field = alpha_stable(&grads_pre, activations, request.lambda, request.alpha_epsilon)?;
            if let Some(kappa) = request.alpha_override {
                override_nonzero(&mut field, kappa);
            }
            (gradcam_pp_weights(&grads_mode, &field)?, Some(field))
        }
    };

    let values = combine_maps(&weights, activations)?;
    Ok(Attribution { heatmap: RawHeatmap { values, source: request.clone() }, alphas })
}

/// Replaces every nonzero alpha with the constant `kappa` and refreshes the
/// extremes diagnostics.
pub fn override_nonzero<T: Real>(field: &mut AlphaField<T>, kappa: T) {
    let mut any = false;
    for v in field.values.data_mut() {
        if *v != T::zero() {
            *v = kappa;
            any = true;
        }
    }
    field.nonzero_min = any.then_some(kappa);
    field.nonzero_max = any.then_some(kappa);
}

fn map_sums<T: Real>(t: &Tensor<T>, meta: &FeatureMapMeta) -> Vec<T> {
    let d = t.data();
    (0..meta.maps)
        .map(|k| d[k * meta.size..(k + 1) * meta.size].iter().copied().sum())
        .collect()
}
