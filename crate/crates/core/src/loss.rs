//! Set-prediction loss: matching cost, label assignment and the composite
//! classification + box loss evaluated over the matched pairs.

use crate::autodiff::Var;
use crate::boxes::{giou, BoxCxcywh, GroundTruthObject};
use crate::error::{Error, Result};
use crate::hungarian::{hungarian, MatchResult};
use crate::tensor::Tensor;

/// Weights of the three loss components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub class_weight: f64,
    pub l1_weight: f64,
    pub giou_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        // DETR's fine-tuning weights; the matching cost reuses the same set.
        LossWeights {
            class_weight: 1.0,
            l1_weight: 5.0,
            giou_weight: 2.0,
        }
    }
}

/// Down-weighting applied to the "no object" class in the classification term.
pub const DEFAULT_NO_OBJECT_WEIGHT: f64 = 0.1;

/// Per-component loss report; `total` is the weighted sum of the raw terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub class_term: f64,
    pub l1_term: f64,
    pub giou_term: f64,
    pub weights: LossWeights,
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Pairwise matching cost between predictions and ground-truth objects:
/// `cost[i][j] = w_cls * (-p_i[class_j]) + w_l1 * |b_i - b_j|_1 + w_giou * (1 - giou)`.
///
/// The classification part uses the raw probability rather than the log
/// likelihood (the loss below uses cross-entropy); the asymmetry is
/// intentional and mirrors how these detectors are trained.
pub fn match_cost(
    class_logits: &Tensor,
    boxes: &Tensor,
    gts: &[GroundTruthObject],
    weights: &LossWeights,
) -> Result<Tensor> {
    let tokens = class_logits.shape()[0];
    if boxes.shape() != [tokens, 4] {
        return Err(Error::shape("match_cost", class_logits.shape(), boxes.shape()));
    }
    if gts.len() > tokens {
        return Err(Error::invalid(
            "match_cost",
            format!("{} ground-truth objects exceed {} detection tokens", gts.len(), tokens),
        ));
    }
    let mut cost = Tensor::zeros(&[tokens, gts.len()]);
    for i in 0..tokens {
        let probs = softmax_row(class_logits.row(i));
        let pred = BoxCxcywh::new(boxes.at2(i, 0), boxes.at2(i, 1), boxes.at2(i, 2), boxes.at2(i, 3));
        for (j, gt) in gts.iter().enumerate() {
            let l1 = (pred.cx - gt.bbox.cx).abs()
                + (pred.cy - gt.bbox.cy).abs()
                + (pred.w - gt.bbox.w).abs()
                + (pred.h - gt.bbox.h).abs();
            let g = giou(&pred.corners(), &gt.bbox.corners())?;
            cost.data_mut()[i * gts.len() + j] = weights.class_weight * (-probs[gt.class_id])
                + weights.l1_weight * l1
                + weights.giou_weight * (1.0 - g);
        }
    }
    Ok(cost)
}

/// Optimal prediction-to-object assignment for one image.
pub fn assign(
    class_logits: &Tensor,
    boxes: &Tensor,
    gts: &[GroundTruthObject],
    weights: &LossWeights,
) -> Result<MatchResult> {
    hungarian(&match_cost(class_logits, boxes, gts, weights)?)
}

/// Differentiable generalized IoU for row-aligned box pairs.
///
/// `pred` and `gt` are `(n, 4)` center-form tensors on the same tape; the
/// result is an `(n, 1)` column of GIoU values built from graph primitives so
/// gradients flow into the predicted boxes.
pub fn giou_pairs<'t>(pred: Var<'t>, gt: Var<'t>) -> Result<Var<'t>> {
    let col = |v: Var<'t>, c: usize| v.slice(1, c, c + 1);
    let (pcx, pcy, pw, ph) = (col(pred, 0)?, col(pred, 1)?, col(pred, 2)?, col(pred, 3)?);
    let (gcx, gcy, gw, gh) = (col(gt, 0)?, col(gt, 1)?, col(gt, 2)?, col(gt, 3)?);

    let px1 = pcx.sub(pw.scale(0.5))?;
    let px2 = pcx.add(pw.scale(0.5))?;
    let py1 = pcy.sub(ph.scale(0.5))?;
    let py2 = pcy.add(ph.scale(0.5))?;
    let gx1 = gcx.sub(gw.scale(0.5))?;
    let gx2 = gcx.add(gw.scale(0.5))?;
    let gy1 = gcy.sub(gh.scale(0.5))?;
    let gy2 = gcy.add(gh.scale(0.5))?;

    let iw = px2.minimum(gx2)?.sub(px1.maximum(gx1)?)?.relu();
    let ih = py2.minimum(gy2)?.sub(py1.maximum(gy1)?)?.relu();
    let inter = iw.mul(ih)?;
    let union = pw.mul(ph)?.add(gw.mul(gh)?)?.sub(inter)?;
    let iou = inter.div(union)?;

    let ew = px2.maximum(gx2)?.sub(px1.minimum(gx1)?)?;
    let eh = py2.maximum(gy2)?.sub(py1.minimum(gy1)?)?;
    let enclose = ew.mul(eh)?;
    iou.sub(enclose.sub(union)?.div(enclose)?)
}

/// DETR-style set loss for one image with a fixed assignment.
///
/// Classification is weighted cross-entropy over every detection token
/// (unmatched tokens are labeled "no object", class `k`, down-weighted by
/// `no_object_weight` and averaged per token); the L1 and GIoU terms run on
/// matched pairs only, normalized by the number of objects. The assignment is
/// a constant of the forward pass; gradients do not flow through matching.
pub fn set_loss<'t>(
    class_logits: Var<'t>,
    boxes: Var<'t>,
    gts: &[GroundTruthObject],
    matching: &MatchResult,
    weights: &LossWeights,
    no_object_weight: f64,
) -> Result<(Var<'t>, LossReport)> {
    let logits_shape = class_logits.shape();
    let tokens = logits_shape[0];
    let num_classes = logits_shape[1] - 1;
    if matching.assignment.len() != gts.len() {
        return Err(Error::invalid(
            "set_loss",
            format!("{} matched pairs for {} objects", matching.assignment.len(), gts.len()),
        ));
    }

    let mut targets = vec![num_classes; tokens];
    for &(pred, gt) in &matching.assignment {
        if pred >= tokens || gt >= gts.len() {
            return Err(Error::invalid("set_loss", format!("assignment ({pred}, {gt}) out of range")));
        }
        targets[pred] = gts[gt].class_id;
    }
    let mut class_weights = vec![1.0; num_classes];
    class_weights.push(no_object_weight);
    let class_term = class_logits.cross_entropy(&targets, &class_weights)?;

    let tape = class_logits.tape();
    let (l1_term, giou_term) = if gts.is_empty() {
        (tape.constant(Tensor::scalar(0.0)), tape.constant(Tensor::scalar(0.0)))
    } else {
        let rows: Vec<usize> = matching.assignment.iter().map(|&(p, _)| p).collect();
        let mut gt_data = Vec::with_capacity(gts.len() * 4);
        for &(_, g) in &matching.assignment {
            let b = gts[g].bbox;
            gt_data.extend_from_slice(&[b.cx, b.cy, b.w, b.h]);
        }
        let gt_boxes = tape.constant(Tensor::from_vec(vec![gts.len(), 4], gt_data)?);
        let matched = boxes.select_rows(&rows)?;
        let inv_n = 1.0 / gts.len() as f64;
        let l1 = matched.l1_distance(gt_boxes)?.scale(inv_n);
        let g = giou_pairs(matched, gt_boxes)?.scale(-1.0).shift(1.0).sum_all().scale(inv_n);
        (l1, g)
    };

    let total = class_term
        .scale(weights.class_weight)
        .add(l1_term.scale(weights.l1_weight))?
        .add(giou_term.scale(weights.giou_weight))?;

    let report = LossReport {
        total: total.value().item(),
        class_term: class_term.value().item(),
        l1_term: l1_term.value().item(),
        giou_term: giou_term.value().item(),
        weights: *weights,
    };
    Ok((total, report))
}
