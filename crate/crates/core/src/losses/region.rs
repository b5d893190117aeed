//! Pixel-level objectives: hard-pixel weight map, weighted BCE, weighted IoU, and the two
//! objectives built from them (supervised and cross-network similarity).

use super::types::{MaskBatch, MaskKind, MaskLoss, PairLoss, WeightMap};
use crate::error::{MmsError, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any logarithm.
pub const PROB_EPS: f64 = 1e-6;

/// Box-filter size used by the supervised and similarity objectives.
pub const SUP_WEIGHT_KERNEL: usize = 31;

/// Extra weight given to a pixel that disagrees completely with its neighbourhood.
const HARD_PIXEL_GAIN: f64 = 5.0;

/// `1 + 5·|boxavg_k(y) − y|` with edge-replicated borders.
pub fn weight_map(y: &MaskBatch, kernel: usize) -> Result<WeightMap> {
    if y.kind() != MaskKind::Label {
        return Err(MmsError::Validation(
            "weight_map expects a binary label batch".into(),
        ));
    }
    if kernel.is_multiple_of(2) {
        return Err(MmsError::Parameter(format!(
            "weight map kernel must be odd, got {kernel}"
        )));
    }
    if kernel > y.height().min(y.width()) {
        return Err(MmsError::Parameter(format!(
            "weight map kernel {kernel} exceeds image size {}x{}",
            y.height(),
            y.width()
        )));
    }
    Ok(soft_weight_map(y, kernel))
}

/// The kernel the supervised objective uses on an `h×w` image: 31, shrunk to the largest
/// odd size that fits.
pub fn sup_kernel(height: usize, width: usize) -> usize {
    let fit = height.min(width);
    let fit = if fit.is_multiple_of(2) { fit - 1 } else { fit };
    SUP_WEIGHT_KERNEL.min(fit)
}

/// Weight map of an arbitrary (possibly soft) target.
pub(crate) fn soft_weight_map(y: &MaskBatch, kernel: usize) -> WeightMap {
    let (h, w) = (y.height(), y.width());
    let mut values = Vec::with_capacity(y.values().len());
    for b in 0..y.batch() {
        let img = y.image(b);
        let avg = box_average(img, h, w, kernel);
        values.extend(
            img.iter()
                .zip(&avg)
                .map(|(t, a)| 1.0 + HARD_PIXEL_GAIN * (a - t).abs()),
        );
    }
    WeightMap {
        batch: y.batch(),
        height: h,
        width: w,
        values,
    }
}

/// Mean over a `k×k` window, coordinates clamped to the image (separable).
fn box_average(img: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let r = k / 2;
    let mut rows = vec![0.0; h * w];
    let mut prefix = vec![0.0; w.max(h) + 2 * r + 1];
    for y in 0..h {
        let row = &img[y * w..(y + 1) * w];
        for j in 0..w + 2 * r {
            let src = (j as isize - r as isize).clamp(0, w as isize - 1) as usize;
            prefix[j + 1] = prefix[j] + row[src];
        }
        for x in 0..w {
            rows[y * w + x] = (prefix[x + k] - prefix[x]) / k as f64;
        }
    }
    let mut out = vec![0.0; h * w];
    for x in 0..w {
        for j in 0..h + 2 * r {
            let src = (j as isize - r as isize).clamp(0, h as isize - 1) as usize;
            prefix[j + 1] = prefix[j] + rows[src * w + x];
        }
        for y in 0..h {
            out[y * w + x] = (prefix[y + k] - prefix[y]) / k as f64;
        }
    }
    out
}

fn check_operands(p: &MaskBatch, y: &MaskBatch, w: &WeightMap) -> Result<()> {
    if !p.same_shape(y) || !w.matches(p) {
        return Err(MmsError::Validation(format!(
            "loss operands disagree in shape: p {}x{}x{}, y {}x{}x{}",
            p.batch(),
            p.height(),
            p.width(),
            y.batch(),
            y.height(),
            y.width()
        )));
    }
    Ok(())
}

pub fn weighted_bce(p: &MaskBatch, y: &MaskBatch, w: &WeightMap) -> Result<f64> {
    Ok(weighted_bce_with_grad(p, y, w)?.value)
}

/// Per image `Σ w·bce(p, y) / Σ w`, averaged over the batch; the gradient is zero where
/// the clamp is active.
pub fn weighted_bce_with_grad(p: &MaskBatch, y: &MaskBatch, w: &WeightMap) -> Result<MaskLoss> {
    check_operands(p, y, w)?;
    let bsz = p.batch() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(p.values().len());
    for b in 0..p.batch() {
        let (pi, yi, wi) = (p.image(b), y.image(b), w.image(b));
        let wsum: f64 = wi.iter().sum();
        if wsum <= 0.0 {
            return Err(MmsError::Validation("weight map sums to zero".into()));
        }
        let mut acc = 0.0;
        for ((&pv, &yv), &wv) in pi.iter().zip(yi).zip(wi) {
            let pc = pv.clamp(PROB_EPS, 1.0 - PROB_EPS);
            acc += wv * (-yv * pc.ln() - (1.0 - yv) * (1.0 - pc).ln());
            let g = if !(PROB_EPS..=1.0 - PROB_EPS).contains(&pv) {
                0.0
            } else {
                wv * (-yv / pc + (1.0 - yv) / (1.0 - pc)) / wsum / bsz
            };
            grad.push(g);
        }
        value += acc / wsum;
    }
    Ok(MaskLoss {
        value: value / bsz,
        grad,
    })
}

pub fn weighted_iou(p: &MaskBatch, y: &MaskBatch, w: &WeightMap) -> Result<f64> {
    Ok(weighted_iou_with_grad(p, y, w)?.value)
}

/// Per image `1 − (I + 1)/(U − I + 1)` with `I = Σ w·p·y`, `U = Σ w·(p + y)`; batch mean.
pub fn weighted_iou_with_grad(p: &MaskBatch, y: &MaskBatch, w: &WeightMap) -> Result<MaskLoss> {
    check_operands(p, y, w)?;
    let bsz = p.batch() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(p.values().len());
    for b in 0..p.batch() {
        let (pi, yi, wi) = (p.image(b), y.image(b), w.image(b));
        let mut inter = 0.0;
        let mut union = 0.0;
        for ((&pv, &yv), &wv) in pi.iter().zip(yi).zip(wi) {
            inter += wv * pv * yv;
            union += wv * (pv + yv);
        }
        let num = inter + 1.0;
        let den = union - inter + 1.0;
        value += 1.0 - num / den;
        let den2 = den * den;
        for (&yv, &wv) in yi.iter().zip(wi) {
            grad.push(-wv * (yv * den - num * (1.0 - yv)) / den2 / bsz);
        }
    }
    Ok(MaskLoss {
        value: value / bsz,
        grad,
    })
}

/// `weighted_iou + weighted_bce` against `target` with the given weights.
fn region_objective(p: &MaskBatch, target: &MaskBatch, w: &WeightMap) -> Result<MaskLoss> {
    let iou = weighted_iou_with_grad(p, target, w)?;
    let bce = weighted_bce_with_grad(p, target, w)?;
    Ok(MaskLoss {
        value: iou.value + bce.value,
        grad: iou.grad.iter().zip(&bce.grad).map(|(a, b)| a + b).collect(),
    })
}

pub fn sup_loss(p: &MaskBatch, y: &MaskBatch) -> Result<f64> {
    Ok(sup_loss_with_grad(p, y)?.value)
}

/// Weighted IoU plus weighted BCE under the hard-pixel weight map of `y`.
pub fn sup_loss_with_grad(p: &MaskBatch, y: &MaskBatch) -> Result<MaskLoss> {
    if !p.same_shape(y) {
        return Err(MmsError::Validation("sup_loss operands disagree in shape".into()));
    }
    let w = weight_map(y, sup_kernel(y.height(), y.width()))?;
    region_objective(p, y, &w)
}

pub fn similarity_loss(p1: &MaskBatch, p2: &MaskBatch) -> Result<f64> {
    Ok(similarity_loss_with_grad(p1, p2)?.value)
}

/// Symmetric agreement between two predictions of the same images:
/// `½·[R(p1; p2) + R(p2; p1)]` where `R(p; t)` is the supervised objective with `t` as a
/// fixed soft target. Target slots carry no gradient, so `grad_a` is `½·∂R(p1; p2)/∂p1`.
pub fn similarity_loss_with_grad(p1: &MaskBatch, p2: &MaskBatch) -> Result<PairLoss> {
    if !p1.same_shape(p2) {
        return Err(MmsError::Validation(
            "similarity_loss operands disagree in shape".into(),
        ));
    }
    let k = sup_kernel(p1.height(), p1.width());
    let forward = region_objective(p1, p2, &soft_weight_map(p2, k))?;
    let backward = region_objective(p2, p1, &soft_weight_map(p1, k))?;
    Ok(PairLoss {
        value: 0.5 * (forward.value + backward.value),
        grad_a: forward.grad.into_iter().map(|g| 0.5 * g).collect(),
        grad_b: backward.grad.into_iter().map(|g| 0.5 * g).collect(),
    })
}
