//! Training objectives: per-pixel cross-entropy, the feature-consistency
//! term between an image and its geometrically augmented copy, and the
//! combined two-branch loss with exact parameter gradients.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::augment::{AugRecord, apply_full, apply_geometric, apply_geometric_mask, invert_geometric};
use crate::error::{Error, Result};
use crate::model::{Params, SegModel};

/// Scalars produced by one two-branch loss evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_seg_orig: f64,
    pub l_seg_aug: f64,
    pub l_ai: f64,
    pub l_tot: f64,
    pub valid_pixel_count: usize,
}

/// How the consistency term reduces over the feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AiReduction {
    /// Mean of squared differences over all channels and pixels. The default;
    /// keeps the weight of the term independent of the feature width.
    PerElement,
    /// Squared L2 norm over channels per pixel, then mean over pixels.
    PerPixelNorm,
}

impl Default for AiReduction {
    fn default() -> Self {
        AiReduction::PerElement
    }
}

/// Switches for the consistency term in [`total_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AiOptions {
    /// When set, the original branch's features are treated as a fixed target
    /// and only the augmented branch receives consistency gradients.
    pub stop_gradient: bool,
    pub reduction: AiReduction,
}

/// Cross-entropy gradient bundle from [`seg_loss_with_grad`].
pub struct SegLossGrad {
    pub loss: f64,
    /// ∂loss/∂logits, zero at invalid pixels.
    pub d_logits: Array3<f64>,
    pub valid_pixels: usize,
}

/// Mean cross-entropy over valid pixels, with its gradient in the logits.
///
/// The per-pixel term is −log softmax(logits)[y], computed with
/// max-subtraction so large logits cannot overflow the exponentials.
pub fn seg_loss_with_grad(
    logits: &Array3<f64>,
    y: &Array2<u8>,
    valid: Option<&Array2<bool>>,
) -> Result<SegLossGrad> {
    let (c, h, w) = logits.dim();
    if y.dim() != (h, w) {
        return Err(Error::InvalidInput(format!(
            "label mask {:?} does not match logits {h}x{w}",
            y.dim()
        )));
    }
    if let Some(v) = valid {
        if v.dim() != (h, w) {
            return Err(Error::InvalidInput(format!(
                "validity mask {:?} does not match logits {h}x{w}",
                v.dim()
            )));
        }
    }

    let mut d_logits = Array3::<f64>::zeros((c, h, w));
    let mut total = 0.0;
    let mut n_valid = 0usize;
    for i in 0..h {
        for j in 0..w {
            if valid.is_some_and(|v| !v[[i, j]]) {
                continue;
            }
            let cls = y[[i, j]] as usize;
            if cls >= c {
                return Err(Error::InvalidInput(format!(
                    "label {cls} out of range for {c} classes"
                )));
            }
            n_valid += 1;
            let mut max = f64::NEG_INFINITY;
            for k in 0..c {
                max = max.max(logits[[k, i, j]]);
            }
            let mut denom = 0.0;
            for k in 0..c {
                denom += (logits[[k, i, j]] - max).exp();
            }
            total += denom.ln() + max - logits[[cls, i, j]];
            for k in 0..c {
                let p = (logits[[k, i, j]] - max).exp() / denom;
                d_logits[[k, i, j]] = p - if k == cls { 1.0 } else { 0.0 };
            }
        }
    }
    if n_valid == 0 {
        return Err(Error::InvalidInput("empty loss support".into()));
    }
    let inv = 1.0 / n_valid as f64;
    d_logits.mapv_inplace(|v| v * inv);
    Ok(SegLossGrad {
        loss: total * inv,
        d_logits,
        valid_pixels: n_valid,
    })
}

/// Mean cross-entropy over valid pixels (scalar only).
pub fn seg_loss(logits: &Array3<f64>, y: &Array2<u8>, valid: Option<&Array2<bool>>) -> Result<f64> {
    seg_loss_with_grad(logits, y, valid).map(|g| g.loss)
}

fn ai_denominator(dim: (usize, usize, usize), reduction: AiReduction) -> f64 {
    match reduction {
        AiReduction::PerElement => (dim.0 * dim.1 * dim.2) as f64,
        AiReduction::PerPixelNorm => (dim.1 * dim.2) as f64,
    }
}

/// Consistency loss between original features and augmented-branch features,
/// after undoing the record's geometric ops on the latter. Photometric jitter
/// in the record is ignored: it acts on the input image, not on feature
/// indexing, so there is nothing to undo.
pub fn ai_loss_with(
    f_orig: &Array3<f64>,
    f_aug: &Array3<f64>,
    rec: &AugRecord,
    reduction: AiReduction,
) -> Result<f64> {
    let dim = f_orig.dim();
    if f_aug.dim() != dim {
        return Err(Error::InvalidInput(format!(
            "feature shapes differ: {:?} vs {:?}",
            dim,
            f_aug.dim()
        )));
    }
    if rec.needs_square() && dim.1 != dim.2 {
        return Err(Error::InvalidInput(format!(
            "quarter-turn rotation needs square features, got {}x{}",
            dim.1, dim.2
        )));
    }
    let g = invert_geometric(f_aug, &rec.geometric)?;
    let sum: f64 = f_orig
        .iter()
        .zip(g.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / ai_denominator(dim, reduction))
}

/// [`ai_loss_with`] under the default per-element reduction.
pub fn ai_loss(f_orig: &Array3<f64>, f_aug: &Array3<f64>, rec: &AugRecord) -> Result<f64> {
    ai_loss_with(f_orig, f_aug, rec, AiReduction::PerElement)
}

/// Everything a training step needs from one loss evaluation.
pub struct TotalLoss {
    pub report: LossReport,
    pub grads: Params,
    /// Logits of the un-augmented branch, kept for confidence tracking.
    pub logits_orig: Array3<f64>,
}

/// Two-branch training loss
///
///   l_tot = l_seg(x, y) + l_seg(A(x), A_g(y)) + λ · l_ai
///
/// where A applies the record's geometric and photometric ops and A_g its
/// geometric ops alone. Returns the exact gradient of `l_tot` in the model
/// parameters; the consistency term backpropagates through both branches
/// (the adjoint of undoing a permutation is applying it), unless
/// `opts.stop_gradient` detaches the original branch.
pub fn total_loss(
    model: &SegModel,
    x: &Array3<f64>,
    y: &Array2<u8>,
    valid: Option<&Array2<bool>>,
    rec: &AugRecord,
    lambda: f64,
    opts: &AiOptions,
) -> Result<TotalLoss> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "consistency weight must be a finite non-negative number, got {lambda}"
        )));
    }

    let trace_o = model.forward(x)?;
    let logits_orig = trace_o.logits.clone();
    let seg_o = seg_loss_with_grad(&trace_o.logits, y, valid)?;

    let (x_aug, y_aug) = apply_full(x, y, rec)?;
    let valid_aug = match valid {
        Some(v) => Some(apply_geometric_mask(v, &rec.geometric)?),
        None => None,
    };
    let trace_a = model.forward(&x_aug)?;
    let seg_a = seg_loss_with_grad(&trace_a.logits, &y_aug, valid_aug.as_ref())?;

    let dim = trace_o.features.dim();
    if rec.needs_square() && dim.1 != dim.2 {
        return Err(Error::InvalidInput(format!(
            "quarter-turn rotation needs square features, got {}x{}",
            dim.1, dim.2
        )));
    }
    let aligned = invert_geometric(&trace_a.features, &rec.geometric)?;
    let diff = &trace_o.features - &aligned;
    let denom = ai_denominator(dim, opts.reduction);
    let l_ai = diff.iter().map(|v| v * v).sum::<f64>() / denom;

    let coef = 2.0 * lambda / denom;
    let d_feat_orig = if opts.stop_gradient {
        Array3::zeros(dim)
    } else {
        diff.mapv(|v| coef * v)
    };
    let d_feat_aug = apply_geometric(&diff.mapv(|v| -coef * v), &rec.geometric)?;

    let mut grads = model.backward(trace_o, &seg_o.d_logits, &d_feat_orig)?;
    let grads_a = model.backward(trace_a, &seg_a.d_logits, &d_feat_aug)?;
    grads.add_scaled(&grads_a, 1.0);

    let l_tot = seg_o.loss + seg_a.loss + lambda * l_ai;
    Ok(TotalLoss {
        report: LossReport {
            l_seg_orig: seg_o.loss,
            l_seg_aug: seg_a.loss,
            l_ai,
            l_tot,
            valid_pixel_count: seg_o.valid_pixels,
        },
        grads,
        logits_orig,
    })
}
