//! Numerical auditor for the Grad-CAM++ derivation, plus the generic
//! gradient checker.
//!
//! Everything here works on deliberately tiny models by finite differences
//! in 64-bit: the corrected product-rule identity for the derivative of the
//! pooled-score equation (including its mixed cross-derivatives), the
//! underdetermination of the alphas' defining equation via explicitly
//! constructed solution families, the residual of the pooled-score equation
//! under the implemented alphas, the insensitivity of the high-order alpha
//! formula to linear score shifts, and the dependence of the alphas on the
//! exponent parameter lambda.
//!
//! The audited score is `Y = exp(S_c)` by default (the smooth increasing
//! function of the raw class score the derivation assumes); the raw score
//! itself is available for linear-tail checks.

use serde_json::{json, Value};

use crate::cam::{alpha_cubic, alpha_stable};
use crate::error::{Error, Result};
use crate::eval::{num, Report};
use crate::nn::{LayerSpec, LayerWeights, Model, ScoreMode, ScoreSpec};
use crate::rng::SplitMix64;
use crate::tensor::{FeatureMapMeta, Tensor};

/// Which scalar function of the activations is audited.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuditScore {
    /// Raw class score `S_c` (linear whenever the tail is linear).
    PreSoftmax,
    /// `exp(S_c)`, the smooth score the alpha derivation assumes.
    ExpPreSoftmax,
}

/// One probed unit of the audited layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeUnit {
    pub map: usize,
    pub row: usize,
    pub col: usize,
}

impl ProbeUnit {
    fn offset(&self, meta: &FeatureMapMeta) -> usize {
        (self.map * meta.height + self.row) * meta.width + self.col
    }
}

/// Residuals of the derivative identity at one probe: the finite-difference
/// left-hand side against the corrected right-hand side and against the
/// original derivation's single-map form, which drops the cross-derivative
/// summation.
#[derive(Debug, Clone)]
pub struct IdentityCheckResult {
    pub probe: ProbeUnit,
    pub lhs: f64,
    pub rhs_corrected: f64,
    pub rhs_original: f64,
    pub rel_residual_corrected: f64,
    pub rel_residual_original: f64,
    pub tolerance_used: f64,
}

/// One explicitly constructed solution of the alphas' defining equation
/// `sum C * alpha = Y`, parameterized by arbitrary betas.
#[derive(Debug, Clone)]
pub struct BetaFamily {
    pub betas: Tensor<f64>,
    /// `C[k,a,b] = dY/dA[k,a,b] * sum(A_k)`, no ReLU.
    pub coefficients: Tensor<f64>,
    pub alphas: Tensor<f64>,
    /// `sum C * beta`; admissible families keep it away from zero.
    pub normalizer: f64,
    /// The score `Y` the family reproduces.
    pub score: f64,
}

impl BetaFamily {
    /// Relative residual of the defining equation.
    pub fn residual(&self) -> f64 {
        let recon: f64 = self
            .coefficients
            .data()
            .iter()
            .zip(self.alphas.data())
            .map(|(c, a)| c * a)
            .sum();
        (recon - self.score).abs() / self.score.abs().max(1e-300)
    }
}

/// Residual of the pooled-score equation `Y = sum_k w_k sum_ij A_ij`
/// under one choice of alphas.
#[derive(Debug, Clone)]
pub struct ResidualReport {
    /// `Y = exp(S_c)`; infinite when the exponential overflowed.
    pub score: f64,
    pub pre_softmax: f64,
    pub reconstruction: f64,
    pub abs_residual: f64,
    /// `|reconstruction / Y - 1|`, computed in ratio space so it stays
    /// finite even when `Y` itself overflows.
    pub rel_residual: f64,
    pub overflow: bool,
}

/// Source of the alphas for [`eq5_residual`].
#[derive(Debug, Clone, Copy)]
pub enum AlphaSource {
    Stable { lambda: f64 },
    Cubic { lambda: f64 },
    BetaFamily { seed: u64 },
}

/// Per-lambda summary from [`lambda_sweep`].
#[derive(Debug, Clone)]
pub struct LambdaSummary {
    pub lambda: f64,
    pub zero_count: usize,
    pub nonzero_min: Option<f64>,
    pub nonzero_max: Option<f64>,
    /// Largest elementwise alpha change against the previous lambda.
    pub max_diff_from_previous: Option<f64>,
}

/// Result of the linear-shift insensitivity check on the high-order formula.
#[derive(Debug, Clone)]
pub struct LinearityShiftResult {
    /// Largest change of any finite-difference alpha when the score gains a
    /// random linear term; analytically zero.
    pub max_alpha_shift: f64,
    /// Change of the score itself (one side of the defining equation).
    pub score_change: f64,
    /// Change of the pooled reconstruction (the other side).
    pub reconstruction_change: f64,
    pub units_checked: usize,
    pub units_skipped: usize,
}

// ---------------------------------------------------------------------------
// Audit point: one (model, image, layer, class) context
// ---------------------------------------------------------------------------

struct AuditPoint<'m> {
    model: &'m Model<f64>,
    layer: usize,
    class: usize,
    score_kind: AuditScore,
    activation: Tensor<f64>,
    meta: FeatureMapMeta,
}

impl<'m> AuditPoint<'m> {
    fn new(
        model: &'m Model<f64>,
        image: &Tensor<f64>,
        layer: usize,
        class: usize,
        score_kind: AuditScore,
    ) -> Result<Self> {
        model.check_class(class)?;
        let trace = model.forward(image)?;
        if layer >= model.layers().len() || model.output_shapes()[layer].len() != 3 {
            return Err(Error::NonSpatialLayer { index: layer });
        }
        let activation = trace.activations[layer].clone();
        let meta = FeatureMapMeta::from_shape(activation.shape())?;
        Ok(AuditPoint { model, layer, class, score_kind, activation, meta })
    }

    fn raw_score(&self, a: &Tensor<f64>) -> Result<f64> {
        let tail = self.model.forward_from(self.layer, a)?;
        Ok(tail.pre_softmax[self.class])
    }

    /// The audited scalar `Y(A)`.
    fn score_of(&self, a: &Tensor<f64>) -> Result<f64> {
        let s = self.raw_score(a)?;
        Ok(match self.score_kind {
            AuditScore::PreSoftmax => s,
            AuditScore::ExpPreSoftmax => s.exp(),
        })
    }

    /// Gradient of the raw class score, `dS_c/dA`.
    fn grad_raw(&self, a: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.model.grad_from_activation(
            self.layer,
            a,
            ScoreSpec { class_index: self.class, mode: ScoreMode::PreSoftmax },
        )
    }

    /// Gradient of the audited score, `dY/dA`.
    fn grad_score(&self, a: &Tensor<f64>) -> Result<Tensor<f64>> {
        let g = self.grad_raw(a)?;
        Ok(match self.score_kind {
            AuditScore::PreSoftmax => g,
            AuditScore::ExpPreSoftmax => {
                let y = self.raw_score(a)?.exp();
                g.scale(y)
            }
        })
    }

    fn map_sums(&self, a: &Tensor<f64>) -> Vec<f64> {
        (0..self.meta.maps)
            .map(|k| a.data()[k * self.meta.size..(k + 1) * self.meta.size].iter().sum())
            .collect()
    }

    /// `F(A) = sum_l (sum_ab alpha[l,ab] * dY/dA[l,ab]) * (sum_uv A[l,uv])`,
    /// the right-hand side of the pooled-score equation after substituting
    /// the alpha-weighted gradient sums (no ReLU).
    fn pooled_form(&self, alphas: &Tensor<f64>, a: &Tensor<f64>) -> Result<f64> {
        let grad = self.grad_score(a)?;
        let sums = self.map_sums(a);
        let mut total = 0.0;
        for k in 0..self.meta.maps {
            let inner: f64 = alphas.data()[k * self.meta.size..(k + 1) * self.meta.size]
                .iter()
                .zip(&grad.data()[k * self.meta.size..(k + 1) * self.meta.size])
                .map(|(al, g)| al * g)
                .sum();
            total += inner * sums[k];
        }
        Ok(total)
    }
}

/// Draws `count` distinct probe units of a `[maps, h, w]` layer.
pub fn seeded_probes(shape: &[usize], count: usize, seed: u64) -> Result<Vec<ProbeUnit>> {
    let meta = FeatureMapMeta::from_shape(shape)?;
    let total = meta.maps * meta.size;
    let count = count.min(total);
    let mut rng = SplitMix64::new(seed);
    let mut seen = std::collections::BTreeSet::new();
    while seen.len() < count {
        seen.insert(rng.next_index(total));
    }
    Ok(seen
        .into_iter()
        .map(|off| ProbeUnit {
            map: off / meta.size,
            row: (off % meta.size) / meta.width,
            col: off % meta.width,
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Corrected derivative identity (Appendix)
// ---------------------------------------------------------------------------

/// Verifies, per probe, the derivative of the substituted pooled-score
/// equation with the alphas held constant. The left-hand side is a central
/// finite difference of the full expression; the corrected right-hand side
/// carries the cross-map second-derivative summation, while the original
/// derivation's form keeps only the probed unit's own second derivative.
#[allow(clippy::too_many_arguments)]
pub fn check_corrected_derivative(
    model: &Model<f64>,
    image: &Tensor<f64>,
    layer: usize,
    class: usize,
    score_kind: AuditScore,
    alphas: &Tensor<f64>,
    probes: &[ProbeUnit],
    tolerance: f64,
) -> Result<Vec<IdentityCheckResult>> {
    let point = AuditPoint::new(model, image, layer, class, score_kind)?;
    if alphas.shape() != point.activation.shape() {
        return Err(Error::ShapeMismatch {
            left: alphas.shape().to_vec(),
            right: point.activation.shape().to_vec(),
        });
    }
    let grad0 = point.grad_score(&point.activation)?;
    let sums = point.map_sums(&point.activation);
    let first_order: Vec<f64> = (0..point.meta.maps)
        .map(|k| {
            alphas.data()[k * point.meta.size..(k + 1) * point.meta.size]
                .iter()
                .zip(&grad0.data()[k * point.meta.size..(k + 1) * point.meta.size])
                .map(|(al, g)| al * g)
                .sum()
        })
        .collect();

    let mut results = Vec::with_capacity(probes.len());
    for &probe in probes {
        let off = probe.offset(&point.meta);
        let a0 = point.activation.data()[off];

        // LHS: central difference of the full pooled form, relative step.
        let h1 = 1e-4 * a0.abs().max(1.0);
        let mut plus = point.activation.clone();
        plus.data_mut()[off] = a0 + h1;
        let mut minus = point.activation.clone();
        minus.data_mut()[off] = a0 - h1;
        let span = plus.data()[off] - minus.data()[off];
        let lhs = (point.pooled_form(alphas, &plus)? - point.pooled_form(alphas, &minus)?) / span;

        // Row of the Hessian of Y at the probe, via central differences of
        // the backprop gradient (one row costs two backward passes).
        let h2 = 1e-3 * a0.abs().max(1.0);
        let mut plus2 = point.activation.clone();
        plus2.data_mut()[off] = a0 + h2;
        let mut minus2 = point.activation.clone();
        minus2.data_mut()[off] = a0 - h2;
        let span2 = plus2.data()[off] - minus2.data()[off];
        let gp = point.grad_score(&plus2)?;
        let gm = point.grad_score(&minus2)?;
        let hessian_row: Vec<f64> =
            gp.data().iter().zip(gm.data()).map(|(p, m)| (p - m) / span2).collect();

        // Corrected RHS: first-order term of the probed map plus the
        // cross-map summation over alpha-weighted second derivatives.
        let mut cross = 0.0;
        for l in 0..point.meta.maps {
            let weighted: f64 = alphas.data()[l * point.meta.size..(l + 1) * point.meta.size]
                .iter()
                .zip(&hessian_row[l * point.meta.size..(l + 1) * point.meta.size])
                .map(|(al, h)| al * h)
                .sum();
            cross += sums[l] * weighted;
        }
        let rhs_corrected = first_order[probe.map] + cross;

        // Original derivation's form: same-map first-order term plus
        // sum(A_k) * alpha_probe * d2Y/dA_probe^2 only.
        let rhs_original =
            first_order[probe.map] + sums[probe.map] * alphas.data()[off] * hessian_row[off];

        if !lhs.is_finite() || !rhs_corrected.is_finite() || !rhs_original.is_finite() {
            return Err(Error::Audit(format!(
                "non-finite intermediate at probe [{}, {}, {}]",
                probe.map, probe.row, probe.col
            )));
        }
        let denom = lhs.abs().max(1e-8);
        results.push(IdentityCheckResult {
            probe,
            lhs,
            rhs_corrected,
            rhs_original,
            rel_residual_corrected: (lhs - rhs_corrected).abs() / denom,
            rel_residual_original: (lhs - rhs_original).abs() / denom,
            tolerance_used: tolerance,
        });
    }
    Ok(results)
}

// ---------------------------------------------------------------------------
// Beta families (underdetermination)
// ---------------------------------------------------------------------------

/// Builds a solution family from explicit betas:
/// `alpha = beta * Y / (sum C * beta)`.
pub fn beta_family_from_betas(
    model: &Model<f64>,
    image: &Tensor<f64>,
    layer: usize,
    class: usize,
    betas: Tensor<f64>,
) -> Result<BetaFamily> {
    let point = AuditPoint::new(model, image, layer, class, AuditScore::ExpPreSoftmax)?;
    if betas.shape() != point.activation.shape() {
        return Err(Error::ShapeMismatch {
            left: betas.shape().to_vec(),
            right: point.activation.shape().to_vec(),
        });
    }
    let score = point.score_of(&point.activation)?;
    if !score.is_finite() {
        return Err(Error::Audit(format!(
            "exp overflow: raw score {}",
            point.raw_score(&point.activation)?
        )));
    }
    let grad = point.grad_score(&point.activation)?;
    let sums = point.map_sums(&point.activation);
    let mut coeff = vec![0.0; grad.len()];
    for k in 0..point.meta.maps {
        for off in k * point.meta.size..(k + 1) * point.meta.size {
            coeff[off] = grad.data()[off] * sums[k];
        }
    }
    let coefficients = Tensor::from_vec(grad.shape().to_vec(), coeff)?;
    let normalizer: f64 =
        coefficients.data().iter().zip(betas.data()).map(|(c, b)| c * b).sum();
    if normalizer.abs() <= 1e-9 {
        return Err(Error::Audit("inadmissible betas: normalizer too small".into()));
    }
    let alphas = betas.map(|b| b * score / normalizer);
    Ok(BetaFamily { betas, coefficients, alphas, normalizer, score })
}

/// Draws random betas in [-1, 1) until the admissibility condition holds
/// (at most 100 consecutive redraws) and builds the family.
pub fn construct_beta_family(
    model: &Model<f64>,
    image: &Tensor<f64>,
    layer: usize,
    class: usize,
    seed: u64,
) -> Result<BetaFamily> {
    let point = AuditPoint::new(model, image, layer, class, AuditScore::ExpPreSoftmax)?;
    let shape = point.activation.shape().to_vec();
    let n = point.activation.len();
    drop(point);
    let mut rng = SplitMix64::new(seed);
    for _ in 0..100 {
        let betas =
            Tensor::from_vec(shape.clone(), (0..n).map(|_| rng.next_symmetric()).collect())?;
        match beta_family_from_betas(model, image, layer, class, betas) {
            Ok(family) => return Ok(family),
            Err(Error::Audit(msg)) if msg.starts_with("inadmissible") => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Audit("100 consecutive inadmissible beta draws; coefficients are degenerate".into()))
}

// ---------------------------------------------------------------------------
// Pooled-score equation residual
// ---------------------------------------------------------------------------

/// Measures how far `sum_k w_k sum_ij A_ij` lands from `Y = exp(S_c)` when
/// the weights come from the chosen alphas. `use_relu` restores the ReLU'd
/// gradient factor; the default (false) matches the appendix, which removes
/// it. Computed in ratio space, so the relative residual survives `exp`
/// overflow.
pub fn eq5_residual(
    model: &Model<f64>,
    image: &Tensor<f64>,
    layer: usize,
    class: usize,
    source: AlphaSource,
    use_relu: bool,
) -> Result<ResidualReport> {
    let point = AuditPoint::new(model, image, layer, class, AuditScore::ExpPreSoftmax)?;
    let raw = point.raw_score(&point.activation)?;
    let score = raw.exp();
    let grad_raw = point.grad_raw(&point.activation)?;
    let sums = point.map_sums(&point.activation);

    let alphas = match source {
        AlphaSource::Stable { lambda } => {
            alpha_stable(&grad_raw, &point.activation, lambda, 0.0)?.values
        }
        AlphaSource::Cubic { lambda } => {
            alpha_cubic(&grad_raw, &point.activation, lambda)?.values
        }
        AlphaSource::BetaFamily { seed } => {
            construct_beta_family(model, image, layer, class, seed)?.alphas
        }
    };

    // Ratio space: w_k / Y uses dS/dA because dY/dA = Y * dS/dA and Y > 0,
    // so the ReLU commutes with the positive factor.
    let mut ratio = 0.0;
    for k in 0..point.meta.maps {
        let mut w_over_y = 0.0;
        for off in k * point.meta.size..(k + 1) * point.meta.size {
            let g = grad_raw.data()[off];
            let factor = if use_relu { g.max(0.0) } else { g };
            w_over_y += alphas.data()[off] * factor;
        }
        ratio += w_over_y * sums[k];
    }
    let rel_residual = (ratio - 1.0).abs();
    Ok(ResidualReport {
        score,
        pre_softmax: raw,
        reconstruction: score * ratio,
        abs_residual: (score * ratio - score).abs(),
        rel_residual,
        overflow: !score.is_finite(),
    })
}

// ---------------------------------------------------------------------------
// Lambda sweep
// ---------------------------------------------------------------------------

/// Alphas under the stable closed form for each lambda, with the largest
/// elementwise change between consecutive values.
pub fn lambda_sweep(
    model: &Model<f64>,
    image: &Tensor<f64>,
    layer: usize,
    class: usize,
    lambdas: &[f64],
) -> Result<Vec<LambdaSummary>> {
    let point = AuditPoint::new(model, image, layer, class, AuditScore::ExpPreSoftmax)?;
    let grad_raw = point.grad_raw(&point.activation)?;
    let mut previous: Option<Tensor<f64>> = None;
    let mut out = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        if lambda <= 0.0 {
            return Err(Error::InvalidRequest("lambda must be positive".into()));
        }
        let field = alpha_stable(&grad_raw, &point.activation, lambda, 0.0)?;
        let max_diff = previous.as_ref().map(|prev| {
            prev.data()
                .iter()
                .zip(field.values.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        });
        out.push(LambdaSummary {
            lambda,
            zero_count: field.zero_gradient_count,
            nonzero_min: field.nonzero_min,
            nonzero_max: field.nonzero_max,
            max_diff_from_previous: max_diff,
        });
        previous = Some(field.values);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Linear-shift insensitivity of the high-order formula
// ---------------------------------------------------------------------------

/// Computes the high-order alphas
/// `d2 / (2 d2 + sum(A_k) d3)` per unit from pure finite differences of the
/// score, for both `Y` and `Y + sum(lambda * A) + c` with random fixed
/// coefficients. Differentiation kills the linear term analytically, so the
/// alphas must agree; both sides of the pooled-score equation still move.
pub fn linearity_shift_check(
    model: &Model<f64>,
    image: &Tensor<f64>,
    layer: usize,
    class: usize,
    seed: u64,
) -> Result<LinearityShiftResult> {
    let point = AuditPoint::new(model, image, layer, class, AuditScore::ExpPreSoftmax)?;
    let n = point.activation.len();
    let mut rng = SplitMix64::new(seed);
    let shift_coeffs: Vec<f64> = (0..n).map(|_| rng.next_symmetric()).collect();
    let shift_const = rng.next_symmetric();

    let shifted = |a: &Tensor<f64>| -> Result<f64> {
        let linear: f64 = shift_coeffs.iter().zip(a.data()).map(|(l, v)| l * v).sum();
        Ok(point.score_of(a)? + linear + shift_const)
    };

    let sums = point.map_sums(&point.activation);
    // Wider step than the second-order default: the linear term cancels
    // exactly in the stencils, so the alpha difference between the two
    // scores is pure rounding noise, which scales as eps / h^3.
    //
    // Units whose gradient is nearly zero make the high-order formula
    // ill-conditioned (the same 0/0 degeneracy the zero rule patches); a
    // first-order noise propagation estimate excludes units where the
    // achievable precision cannot support the comparison.
    const NOISE_BUDGET: f64 = 1e-4 / 3.0;
    let alphas_of = |f: &dyn Fn(&Tensor<f64>) -> Result<f64>| -> Result<Vec<Option<f64>>> {
        let mut out = Vec::with_capacity(n);
        for off in 0..n {
            let map = off / point.meta.size;
            let a0 = point.activation.data()[off];
            let h = 1e-2 * a0.abs().max(1.0);
            let eval = |delta: f64| -> Result<f64> {
                let mut probe = point.activation.clone();
                probe.data_mut()[off] = a0 + delta;
                f(&probe)
            };
            let f2p = eval(2.0 * h)?;
            let f1p = eval(h)?;
            let f0 = eval(0.0)?;
            let f1m = eval(-h)?;
            let f2m = eval(-2.0 * h)?;
            let d2 = (f1p - 2.0 * f0 + f1m) / (h * h);
            let d3 = (f2p - 2.0 * f1p + 2.0 * f1m - f2m) / (2.0 * h * h * h);
            let denom = 2.0 * d2 + sums[map] * d3;
            let alpha = d2 / denom;

            let f_scale = f2p.abs().max(f1p.abs()).max(f0.abs()).max(f1m.abs()).max(f2m.abs());
            let noise_d2 = 4.0 * f64::EPSILON * f_scale / (h * h);
            let noise_d3 = 6.0 * f64::EPSILON * f_scale / (2.0 * h * h * h);
            let alpha_noise = (sums[map] * d3 * noise_d2).abs() / (denom * denom)
                + (sums[map] * d2 * noise_d3).abs() / (denom * denom);
            let tractable = alpha.is_finite() && alpha_noise < NOISE_BUDGET;
            out.push(tractable.then_some(alpha));
        }
        Ok(out)
    };

    let base_score_fn = |a: &Tensor<f64>| point.score_of(a);
    let base_alphas = alphas_of(&base_score_fn)?;
    let shifted_alphas = alphas_of(&shifted)?;

    let mut max_shift = 0.0f64;
    let mut checked = 0;
    let mut skipped = 0;
    for (a, b) in base_alphas.iter().zip(&shifted_alphas) {
        match (a, b) {
            (Some(x), Some(y)) => {
                checked += 1;
                max_shift = max_shift.max((x - y).abs());
            }
            _ => skipped += 1,
        }
    }

    // Both sides of the pooled-score equation move under the shift: the
    // score itself, and the reconstruction through the shifted gradient.
    let y0 = point.score_of(&point.activation)?;
    let y1 = shifted(&point.activation)?;
    let grad0 = point.grad_score(&point.activation)?;
    let recon = |grad: &Tensor<f64>, alphas: &[Option<f64>]| -> f64 {
        let mut total = 0.0;
        for k in 0..point.meta.maps {
            let mut inner = 0.0;
            for off in k * point.meta.size..(k + 1) * point.meta.size {
                if let Some(alpha) = alphas[off] {
                    inner += alpha * grad.data()[off];
                }
            }
            total += inner * sums[k];
        }
        total
    };
    let grad_shifted_data: Vec<f64> =
        grad0.data().iter().zip(&shift_coeffs).map(|(g, l)| g + l).collect();
    let grad_shifted = Tensor::from_vec(grad0.shape().to_vec(), grad_shifted_data)?;
    let recon0 = recon(&grad0, &base_alphas);
    let recon1 = recon(&grad_shifted, &shifted_alphas);

    Ok(LinearityShiftResult {
        max_alpha_shift: max_shift,
        score_change: (y1 - y0).abs(),
        reconstruction_change: (recon1 - recon0).abs(),
        units_checked: checked,
        units_skipped: skipped,
    })
}

// ---------------------------------------------------------------------------
// Gradient check (backprop vs central finite differences)
// ---------------------------------------------------------------------------

/// Summary of a backprop-versus-finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub failures: usize,
    pub tolerance: f64,
    pub step: f64,
    pub pass: bool,
}

/// Compares backprop gradients against central finite differences at
/// `probe_count` randomly selected activation units across every spatial
/// layer. Relative error per unit is `|bp - fd| / max(1e-8, |fd|)`.
///
/// ReLU and maxpool make the score only piecewise differentiable; a probe
/// whose step straddles a kink has no valid finite-difference oracle. Such
/// probes are detected by comparing the two one-sided differences and
/// resampled deterministically from the same stream.
pub fn gradient_check(
    model: &Model<f64>,
    image: &Tensor<f64>,
    score: ScoreSpec,
    probe_count: usize,
    seed: u64,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let trace = model.forward(image)?;
    let spatial: Vec<usize> = (0..model.layers().len())
        .filter(|&i| model.output_shapes()[i].len() == 3)
        .collect();
    if spatial.is_empty() {
        return Err(Error::Empty("model has no spatial layers to probe".into()));
    }
    // Gradients per spatial layer, computed once.
    let mut grads = Vec::new();
    for &layer in &spatial {
        grads.push(model.backward_to_layer(&trace, score, layer)?);
    }

    let f0 = trace.score(score);
    let total_units: usize = spatial.iter().map(|&l| trace.activations[l].len()).sum();
    let mut rng = SplitMix64::new(seed);
    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0f64;
    let mut failures = 0;
    let mut checked = 0;
    let mut attempts = 0;
    while checked < probe_count {
        attempts += 1;
        if attempts > 20 * probe_count {
            return Err(Error::Audit("could not find enough kink-free probe units".into()));
        }
        let mut pick = rng.next_index(total_units);
        let mut which = 0;
        while pick >= trace.activations[spatial[which]].len() {
            pick -= trace.activations[spatial[which]].len();
            which += 1;
        }
        let layer = spatial[which];
        let act = &trace.activations[layer];

        let a0 = act.data()[pick];
        let eval = |delta: f64| -> crate::error::Result<(f64, f64)> {
            let mut probe = act.clone();
            probe.data_mut()[pick] = a0 + delta;
            let actual = probe.data()[pick] - a0;
            Ok((model.forward_from(layer, &probe)?.score(score), actual))
        };
        let (fp, dp) = eval(step)?;
        let (fm, dm) = eval(-step)?;

        // One-sided slopes that disagree grossly mean the step straddled a
        // kink between the two sides.
        let forward_slope = (fp - f0) / dp;
        let backward_slope = (f0 - fm) / (-dm);
        let scale = forward_slope.abs().max(backward_slope.abs()).max(1e-6);
        if (forward_slope - backward_slope).abs() > 0.05 * scale {
            continue;
        }

        let fd = (fp - fm) / (dp - dm);

        // Richardson test: the half-step estimate must agree to well below
        // the tolerance, or a small kink sits inside the interval and the
        // finite difference is not a valid oracle at this unit.
        let (fp2, dp2) = eval(step / 2.0)?;
        let (fm2, dm2) = eval(-step / 2.0)?;
        let fd_half = (fp2 - fm2) / (dp2 - dm2);
        if (fd - fd_half).abs() > (5e-5 * fd_half.abs()).max(1e-9) {
            continue;
        }

        let bp = grads[which].data()[pick];
        let rel = (bp - fd).abs() / fd.abs().max(1e-8);
        sum_rel += rel;
        max_rel = max_rel.max(rel);
        if rel >= tolerance {
            failures += 1;
        }
        checked += 1;
    }
    Ok(GradCheckReport {
        probes: probe_count,
        max_rel_error: max_rel,
        mean_rel_error: sum_rel / probe_count.max(1) as f64,
        failures,
        tolerance,
        step,
        pass: failures == 0,
    })
}

// ---------------------------------------------------------------------------
// Dedicated audit models
// ---------------------------------------------------------------------------

/// Tiny audit head: a 3x3 conv producing two 3x3 feature maps, then a dense
/// readout of 3 classes. Smooth after the probed layer, and small enough
/// that mixed second and third finite differences stay cheap.
pub fn audit_head_model(seed: u64) -> Model<f64> {
    let layers = vec![
        LayerSpec::Conv2d {
            out_channels: 2,
            in_channels: 1,
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            padding: 1,
        },
        LayerSpec::Flatten,
        LayerSpec::Dense { out_features: 3, in_features: 18 },
    ];
    build_seeded(layers, vec![1, 3, 3], seed)
}

/// Linear audit model: an identity 1x1 conv (so the probed layer exists)
/// followed by a dense readout; the raw score is exactly linear in the
/// probed activations.
pub fn linear_audit_model(seed: u64) -> Model<f64> {
    let mut model = build_seeded(
        vec![
            LayerSpec::Conv2d {
                out_channels: 2,
                in_channels: 2,
                kernel_h: 1,
                kernel_w: 1,
                stride: 1,
                padding: 0,
            },
            LayerSpec::Flatten,
            LayerSpec::Dense { out_features: 2, in_features: 18 },
        ],
        vec![2, 3, 3],
        seed,
    );
    // Overwrite the conv with the identity map.
    let conv = LayerWeights {
        kernel: Tensor::from_vec(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        bias: Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap(),
    };
    let mut weights = model.weights().to_vec();
    weights[0] = Some(conv);
    model = Model::new(model.layers().to_vec(), weights, model.input_shape().to_vec()).unwrap();
    model
}

fn build_seeded(layers: Vec<LayerSpec>, input_shape: Vec<usize>, seed: u64) -> Model<f64> {
    let mut rng = SplitMix64::new(seed);
    let weights = layers
        .iter()
        .map(|layer| {
            layer.weight_shapes().map(|(k, b)| {
                let fan_in: usize = match layer {
                    LayerSpec::Conv2d { in_channels, kernel_h, kernel_w, .. } => {
                        in_channels * kernel_h * kernel_w
                    }
                    LayerSpec::Dense { in_features, .. } => *in_features,
                    _ => unreachable!(),
                };
                let scale = 1.0 / (fan_in as f64).sqrt();
                let kn: usize = k.iter().product();
                let bn: usize = b.iter().product();
                LayerWeights {
                    kernel: Tensor::from_vec(k, (0..kn).map(|_| rng.next_centered() * scale).collect())
                        .unwrap(),
                    bias: Tensor::from_vec(b, (0..bn).map(|_| rng.next_centered() * scale).collect())
                        .unwrap(),
                }
            })
        })
        .collect();
    Model::new(layers, weights, input_shape).expect("audit architecture is valid")
}

// ---------------------------------------------------------------------------
// Full audit run
// ---------------------------------------------------------------------------

/// Thresholds used by [`run_audit`].
#[derive(Debug, Clone)]
pub struct AuditConfig {
    pub probe_count: usize,
    pub identity_tolerance: f64,
    pub beta_family_count: usize,
    pub beta_residual_tolerance: f64,
    pub lambda_values: Vec<f64>,
    pub linearity_tolerance: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            probe_count: 8,
            identity_tolerance: 1e-5,
            beta_family_count: 20,
            beta_residual_tolerance: 1e-9,
            lambda_values: vec![0.5, 1.0, 2.0],
            linearity_tolerance: 1e-4,
        }
    }
}

/// Full audit report, serializable as JSON for `check-derivation`.
#[derive(Debug, Clone)]
pub struct AuditReport {
    pub layer: usize,
    pub class: usize,
    pub seed: u64,
    pub identity: Vec<IdentityCheckResult>,
    pub identity_pass: bool,
    /// Probes where the original form's residual exceeds the corrected one.
    pub original_form_worse_on: usize,
    pub beta_family_count: usize,
    pub beta_max_residual: f64,
    pub beta_min_pairwise_diff: f64,
    pub beta_residual_tolerance: f64,
    pub beta_pass: bool,
    pub linearity_tolerance: f64,
    pub eq5_stable: ResidualReport,
    pub eq5_beta: ResidualReport,
    pub eq5_pass: bool,
    pub lambda_sweep: Vec<LambdaSummary>,
    pub lambda_pass: bool,
    pub linearity: LinearityShiftResult,
    pub linearity_pass: bool,
    pub pass: bool,
}

/// Runs every audit check against one model. The image, probe set, constant
/// alphas, and beta draws all derive from `seed`; a `None` class resolves to
/// the argmax on the derived synthetic image.
pub fn run_audit(
    model: &Model<f64>,
    layer: usize,
    class: Option<usize>,
    seed: u64,
    config: &AuditConfig,
) -> Result<AuditReport> {
    let mut rng = SplitMix64::new(seed);
    let image_seed = rng.next_u64();
    let alpha_seed = rng.next_u64();
    let probe_seed = rng.next_u64();
    let shift_seed = rng.next_u64();
    let image = crate::nn::synth_image::<f64>(image_seed, model.input_shape());
    let class = match class {
        Some(c) => c,
        None => model.forward(&image)?.argmax(),
    };

    let layer_shape = model.output_shapes()[layer].clone();
    let unit_count: usize = layer_shape.iter().product();
    let mut alpha_rng = SplitMix64::new(alpha_seed);
    let const_alphas = Tensor::from_vec(
        layer_shape.clone(),
        (0..unit_count).map(|_| alpha_rng.next_symmetric()).collect(),
    )?;
    let probes = seeded_probes(&layer_shape, config.probe_count, probe_seed)?;

    let identity = check_corrected_derivative(
        model,
        &image,
        layer,
        class,
        AuditScore::ExpPreSoftmax,
        &const_alphas,
        &probes,
        config.identity_tolerance,
    )?;
    let identity_pass =
        identity.iter().all(|r| r.rel_residual_corrected < config.identity_tolerance);
    let original_form_worse_on = identity
        .iter()
        .filter(|r| r.rel_residual_original > r.rel_residual_corrected)
        .count();

    let mut families = Vec::with_capacity(config.beta_family_count);
    for i in 0..config.beta_family_count {
        families.push(construct_beta_family(model, &image, layer, class, seed ^ (i as u64 + 1))?);
    }
    let beta_max_residual = families.iter().map(BetaFamily::residual).fold(0.0, f64::max);
    let mut beta_min_pairwise_diff = f64::INFINITY;
    for i in 0..families.len() {
        for j in i + 1..families.len() {
            let diff = families[i]
                .alphas
                .data()
                .iter()
                .zip(families[j].alphas.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            beta_min_pairwise_diff = beta_min_pairwise_diff.min(diff);
        }
    }
    if families.len() < 2 {
        beta_min_pairwise_diff = 0.0;
    }
    let beta_pass = beta_max_residual < config.beta_residual_tolerance
        && (families.len() < 2 || beta_min_pairwise_diff > 0.0);

    let eq5_stable = eq5_residual(model, &image, layer, class, AlphaSource::Stable { lambda: 1.0 }, false)?;
    let eq5_beta = eq5_residual(model, &image, layer, class, AlphaSource::BetaFamily { seed }, false)?;
    let eq5_pass = eq5_beta.rel_residual < config.beta_residual_tolerance
        && eq5_stable.rel_residual > eq5_beta.rel_residual;

    let sweep = lambda_sweep(model, &image, layer, class, &config.lambda_values)?;
    let lambda_pass = sweep
        .iter()
        .skip(1)
        .all(|s| s.max_diff_from_previous.map(|d| d > 0.0).unwrap_or(false));

    let linearity = linearity_shift_check(model, &image, layer, class, shift_seed)?;
    let linearity_pass = linearity.max_alpha_shift < config.linearity_tolerance
        && linearity.score_change > 0.0
        && linearity.reconstruction_change > 0.0;

    let pass = identity_pass && beta_pass && eq5_pass && lambda_pass && linearity_pass;
    Ok(AuditReport {
        layer,
        class,
        seed,
        identity,
        identity_pass,
        original_form_worse_on,
        beta_family_count: families.len(),
        beta_max_residual,
        beta_min_pairwise_diff,
        beta_pass,
        eq5_stable,
        eq5_beta,
        eq5_pass,
        lambda_sweep: sweep,
        lambda_pass,
        linearity,
        linearity_pass,
        pass,
    })
}

fn residual_json(r: &ResidualReport) -> Value {
    json!({
        "score": num(r.score),
        "pre_softmax": num(r.pre_softmax),
        "reconstruction": num(r.reconstruction),
        "abs_residual": num(r.abs_residual),
        "rel_residual": num(r.rel_residual),
        "overflow": r.overflow,
    })
}

impl Report for AuditReport {
    fn to_json(&self) -> Value {
        let identity: Vec<Value> = self
            .identity
            .iter()
            .map(|r| {
                json!({
                    "probe": [r.probe.map, r.probe.row, r.probe.col],
                    "lhs": num(r.lhs),
                    "rhs_corrected": num(r.rhs_corrected),
                    "rhs_original": num(r.rhs_original),
                    "rel_residual_corrected": num(r.rel_residual_corrected),
                    "rel_residual_original": num(r.rel_residual_original),
                    "tolerance": num(r.tolerance_used),
                })
            })
            .collect();
        let sweep: Vec<Value> = self
            .lambda_sweep
            .iter()
            .map(|s| {
                json!({
                    "lambda": num(s.lambda),
                    "zero_count": s.zero_count,
                    "nonzero_min": s.nonzero_min.map(num).unwrap_or(Value::Null),
                    "nonzero_max": s.nonzero_max.map(num).unwrap_or(Value::Null),
                    "max_diff_from_previous": s.max_diff_from_previous.map(num).unwrap_or(Value::Null),
                })
            })
            .collect();
        json!({
            "layer": self.layer,
            "class": self.class,
            "seed": self.seed,
            "corrected_identity": {
                "probes": identity,
                "pass": self.identity_pass,
                "original_form_worse_on": self.original_form_worse_on,
            },
            "beta_families": {
                "count": self.beta_family_count,
                "max_residual": num(self.beta_max_residual),
                "min_pairwise_diff": num(self.beta_min_pairwise_diff),
                "pass": self.beta_pass,
            },
            "pooled_score_residual": {
                "stable": residual_json(&self.eq5_stable),
                "beta_family": residual_json(&self.eq5_beta),
                "pass": self.eq5_pass,
            },
            "lambda_sweep": { "values": sweep, "pass": self.lambda_pass },
            "linearity_shift": {
                "max_alpha_shift": num(self.linearity.max_alpha_shift),
                "score_change": num(self.linearity.score_change),
                "reconstruction_change": num(self.linearity.reconstruction_change),
                "units_checked": self.linearity.units_checked,
                "units_skipped": self.linearity.units_skipped,
                "pass": self.linearity_pass,
            },
            "pass": self.pass,
        })
    }

    fn to_csv(&self) -> String {
        let mut out = String::from("check,pass\n");
        out.push_str(&format!("corrected_identity,{}\n", self.identity_pass));
        out.push_str(&format!("beta_families,{}\n", self.beta_pass));
        out.push_str(&format!("pooled_score_residual,{}\n", self.eq5_pass));
        out.push_str(&format!("lambda_sweep,{}\n", self.lambda_pass));
        out.push_str(&format!("linearity_shift,{}\n", self.linearity_pass));
        out.push_str(&format!("overall,{}\n", self.pass));
        out
    }
}
