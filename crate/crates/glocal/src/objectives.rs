//! Training objectives: global binary cross-entropy, focal + overlap
//! (dice) pixel losses, glocal triplet contrast, and the combined
//! report. Every loss comes with its exact analytic gradient.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{GlocalError, Result};
use crate::scoring::{upsample_adjoint, upsample_bilinear};
use crate::text::GlocalTextEmbeddings;

/// Probability clamp that keeps logarithms finite.
const PROB_CLAMP: f64 = 1e-7;

fn check_same_shape(name: &str, a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(GlocalError::ShapeMismatch {
            name: name.to_string(),
            expected: vec![a.nrows(), a.ncols()],
            found: vec![b.nrows(), b.ncols()],
        });
    }
    Ok(())
}

/// Binary cross-entropy of the anomaly probability against an image
/// label, with the probability clamped to `[1e-7, 1 - 1e-7]`.
pub fn global_loss(p_anomaly: f64, label: u8) -> f64 {
    let p = p_anomaly.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if label == 0 {
        -(1.0 - p).ln()
    } else {
        -p.ln()
    }
}

/// Derivative of [`global_loss`] with respect to `p_anomaly` (zero in
/// the clamped region).
pub fn global_loss_backward(p_anomaly: f64, label: u8) -> f64 {
    if p_anomaly <= PROB_CLAMP || p_anomaly >= 1.0 - PROB_CLAMP {
        return 0.0;
    }
    if label == 0 {
        1.0 / (1.0 - p_anomaly)
    } else {
        -1.0 / p_anomaly
    }
}

/// Focal loss over a two-channel probability field:
/// mean over pixels of `-alpha * (1 - p_t)^gamma * ln(p_t)` where `p_t`
/// is the probability of the true channel under `mask`.
pub fn focal_loss(
    p_normal: &Array2<f64>,
    p_anomaly: &Array2<f64>,
    mask: &Array2<f64>,
    gamma: f64,
    alpha: f64,
) -> Result<f64> {
    check_same_shape("focal p_anomaly", p_normal, p_anomaly)?;
    check_same_shape("focal mask", p_normal, mask)?;
    let count = p_normal.len() as f64;
    let mut sum = 0.0;
    for ((pn, pa), m) in p_normal.iter().zip(p_anomaly.iter()).zip(mask.iter()) {
        let p_t = if *m >= 0.5 { *pa } else { *pn };
        let p_t = p_t.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        sum += -alpha * (1.0 - p_t).powf(gamma) * p_t.ln();
    }
    Ok(sum / count)
}

/// Gradients of [`focal_loss`] with respect to both channels.
pub fn focal_loss_backward(
    p_normal: &Array2<f64>,
    p_anomaly: &Array2<f64>,
    mask: &Array2<f64>,
    gamma: f64,
    alpha: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_same_shape("focal p_anomaly", p_normal, p_anomaly)?;
    check_same_shape("focal mask", p_normal, mask)?;
    let count = p_normal.len() as f64;
    let mut d_normal = Array2::zeros(p_normal.raw_dim());
    let mut d_anomaly = Array2::zeros(p_normal.raw_dim());
    for i in 0..p_normal.nrows() {
        for j in 0..p_normal.ncols() {
            let anomalous = mask[[i, j]] >= 0.5;
            let raw = if anomalous {
                p_anomaly[[i, j]]
            } else {
                p_normal[[i, j]]
            };
            if raw <= PROB_CLAMP || raw >= 1.0 - PROB_CLAMP {
                continue;
            }
            let p_t = raw;
            // d/dp [-(1-p)^g ln p] = g (1-p)^(g-1) ln p - (1-p)^g / p
            let curve = if gamma == 0.0 {
                0.0
            } else {
                gamma * (1.0 - p_t).powf(gamma - 1.0) * p_t.ln()
            };
            let grad = alpha * (curve - (1.0 - p_t).powf(gamma) / p_t) / count;
            if anomalous {
                d_anomaly[[i, j]] = grad;
            } else {
                d_normal[[i, j]] = grad;
            }
        }
    }
    Ok((d_normal, d_anomaly))
}

/// Soft overlap loss `1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps)`.
pub fn dice_loss(pred: &Array2<f64>, target: &Array2<f64>, eps: f64) -> Result<f64> {
    check_same_shape("dice target", pred, target)?;
    let inter: f64 = (pred * target).sum();
    let denom = pred.sum() + target.sum() + eps;
    Ok(1.0 - (2.0 * inter + eps) / denom)
}

/// Gradient of [`dice_loss`] with respect to the prediction.
pub fn dice_loss_backward(
    pred: &Array2<f64>,
    target: &Array2<f64>,
    eps: f64,
) -> Result<Array2<f64>> {
    check_same_shape("dice target", pred, target)?;
    let inter: f64 = (pred * target).sum();
    let denom = pred.sum() + target.sum() + eps;
    let numer = 2.0 * inter + eps;
    // d/dp_i [ -(2 I + eps) / D ] = -(2 t_i D - (2 I + eps)) / D^2
    Ok(Array2::from_shape_fn(pred.raw_dim(), |(i, j)| {
        -(2.0 * target[[i, j]] * denom - numer) / (denom * denom)
    }))
}

/// Per-layer pixel loss: upsample the two grid maps to mask resolution,
/// then `focal([up_n, up_a], mask) + dice(up_n, 1 - mask) +
/// dice(up_a, mask)`.
pub fn local_loss(
    s_normal: &Array2<f64>,
    s_anomaly: &Array2<f64>,
    mask: &Array2<f64>,
    gamma: f64,
    alpha: f64,
    eps: f64,
) -> Result<f64> {
    check_same_shape("local s_anomaly", s_normal, s_anomaly)?;
    let (h, w) = mask.dim();
    let up_n = upsample_bilinear(s_normal, h, w)?;
    let up_a = upsample_bilinear(s_anomaly, h, w)?;
    let inverse = mask.mapv(|m| 1.0 - m);
    Ok(focal_loss(&up_n, &up_a, mask, gamma, alpha)?
        + dice_loss(&up_n, &inverse, eps)?
        + dice_loss(&up_a, mask, eps)?)
}

/// Gradients of [`local_loss`] with respect to both grid-resolution
/// probability maps.
pub fn local_loss_backward(
    s_normal: &Array2<f64>,
    s_anomaly: &Array2<f64>,
    mask: &Array2<f64>,
    gamma: f64,
    alpha: f64,
    eps: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_same_shape("local s_anomaly", s_normal, s_anomaly)?;
    let (h, w) = mask.dim();
    let (gh, gw) = s_normal.dim();
    let up_n = upsample_bilinear(s_normal, h, w)?;
    let up_a = upsample_bilinear(s_anomaly, h, w)?;
    let inverse = mask.mapv(|m| 1.0 - m);

    let (focal_n, focal_a) = focal_loss_backward(&up_n, &up_a, mask, gamma, alpha)?;
    let d_up_n = &focal_n + &dice_loss_backward(&up_n, &inverse, eps)?;
    let d_up_a = &focal_a + &dice_loss_backward(&up_a, mask, eps)?;
    Ok((
        upsample_adjoint(&d_up_n, gh, gw),
        upsample_adjoint(&d_up_a, gh, gw),
    ))
}

/// Squared-pull / hinged-push triplet:
/// `|a - p|^2 + max(0, margin - |a - n|)^2`.
pub fn gcl_triplet(
    anchor: &Array1<f64>,
    positive: &Array1<f64>,
    negative: &Array1<f64>,
    margin: f64,
) -> f64 {
    let pull: f64 = anchor
        .iter()
        .zip(positive.iter())
        .map(|(a, p)| (a - p) * (a - p))
        .sum();
    let dist: f64 = anchor
        .iter()
        .zip(negative.iter())
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let push = (margin - dist).max(0.0);
    pull + push * push
}

/// Gradients of [`gcl_triplet`] with respect to all three vectors. At
/// the hinge boundary and at zero anchor-negative distance the push
/// term uses the zero subgradient.
pub fn gcl_triplet_backward(
    anchor: &Array1<f64>,
    positive: &Array1<f64>,
    negative: &Array1<f64>,
    margin: f64,
) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
    let diff_p = anchor - positive;
    let mut d_anchor = 2.0 * &diff_p;
    let d_positive = -2.0 * &diff_p;

    let diff_n = anchor - negative;
    let dist = diff_n.dot(&diff_n).sqrt();
    let mut d_negative = Array1::zeros(anchor.len());
    if dist > 0.0 && dist < margin {
        let factor = -2.0 * (margin - dist) / dist;
        d_anchor += &(factor * &diff_n);
        d_negative = -factor * &diff_n;
    }
    (d_anchor, d_positive, d_negative)
}

/// Glocal contrast: global prompts anchor their local counterparts —
/// `triplet(g_n, l_n, l_a) + triplet(g_a, l_a, l_n)`.
pub fn gcl_total(emb: &GlocalTextEmbeddings, margin: f64) -> f64 {
    gcl_triplet(
        &emb.global_normal,
        &emb.local_normal,
        &emb.local_anomaly,
        margin,
    ) + gcl_triplet(
        &emb.global_anomaly,
        &emb.local_anomaly,
        &emb.local_normal,
        margin,
    )
}

/// Gradients of [`gcl_total`] with respect to the four embeddings, in
/// the order (global_normal, global_anomaly, local_normal,
/// local_anomaly).
pub fn gcl_total_backward(
    emb: &GlocalTextEmbeddings,
    margin: f64,
) -> (Array1<f64>, Array1<f64>, Array1<f64>, Array1<f64>) {
    let (d_gn, d_ln_1, d_la_1) = gcl_triplet_backward(
        &emb.global_normal,
        &emb.local_normal,
        &emb.local_anomaly,
        margin,
    );
    let (d_ga, d_la_2, d_ln_2) = gcl_triplet_backward(
        &emb.global_anomaly,
        &emb.local_anomaly,
        &emb.local_normal,
        margin,
    );
    (d_gn, d_ga, d_ln_1 + &d_ln_2, d_la_1 + &d_la_2)
}

/// Loss decomposition of one optimization step (or one epoch mean).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossReport {
    pub global: f64,
    /// One entry per tap layer.
    pub per_layer_local: Vec<f64>,
    pub gcl: f64,
    pub lambda_gcl: f64,
    pub total: f64,
}

impl LossReport {
    pub fn local_total(&self) -> f64 {
        self.per_layer_local.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.global.is_finite()
            && self.gcl.is_finite()
            && self.per_layer_local.iter().all(|v| v.is_finite())
    }
}

/// Combine the components: `total = global + sum(local) + lambda * gcl`.
pub fn total_loss(global: f64, per_layer_local: &[f64], gcl: f64, lambda_gcl: f64) -> LossReport {
    let total = global + per_layer_local.iter().sum::<f64>() + lambda_gcl * gcl;
    LossReport {
        global,
        per_layer_local: per_layer_local.to_vec(),
        gcl,
        lambda_gcl,
        total,
    }
}
