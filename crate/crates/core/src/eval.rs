//! COCO-style average precision over synthetic or ingested datasets:
//! greedy score-ordered matching per IoU threshold, 101-point interpolated
//! precision-recall, means over classes then thresholds.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::boxes::{intersection_area, BoxCxcywh, GroundTruthObject};
use crate::model::DetectionOutput;
use crate::tensor::Tensor;

/// One scored detection in normalized center form.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Detection {
    pub class_id: usize,
    pub bbox: BoxCxcywh,
    pub score: f64,
}

/// Ground truth and predictions of one image, in one coordinate frame.
#[derive(Clone, Debug)]
pub struct EvalImage {
    /// Pixel size used to de-normalize boxes before IoU.
    pub size: (usize, usize),
    pub ground_truth: Vec<GroundTruthObject>,
    pub detections: Vec<Detection>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ApReport {
    /// Threshold -> AP mean over classes, keys formatted as "0.50".
    pub ap_per_iou: BTreeMap<String, f64>,
    /// Mean over thresholds of the per-threshold class means; absent when
    /// the dataset has no ground truth at all.
    pub mean_ap: Option<f64>,
    pub ap50: Option<f64>,
    /// Per-class AP averaged over thresholds.
    pub per_class: BTreeMap<usize, f64>,
}

/// The ten COCO thresholds 0.50, 0.55, .., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Extracts scored detections from raw model outputs: score is the largest
/// foreground probability and tokens whose argmax is "no object" are dropped.
pub fn detections_from_output(output: &DetectionOutput, num_classes: usize) -> Vec<Detection> {
    let mut out = Vec::new();
    let logits = &output.class_logits;
    for t in 0..logits.shape()[0] {
        let probs = softmax(logits.row(t));
        let (argmax, _) = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        if argmax == num_classes {
            continue;
        }
        let (best_fg, score) = probs[..num_classes]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, &p)| (i, p))
            .unwrap();
        out.push(Detection {
            class_id: best_fg,
            bbox: BoxCxcywh::new(
                output.boxes.at2(t, 0),
                output.boxes.at2(t, 1),
                output.boxes.at2(t, 2),
                output.boxes.at2(t, 3),
            ),
            score,
        });
    }
    out
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

fn iou_pixels(a: &BoxCxcywh, b: &BoxCxcywh, size: (usize, usize)) -> f64 {
    let (h, w) = (size.0 as f64, size.1 as f64);
    let scale = |bx: &BoxCxcywh| {
        BoxCxcywh {
            cx: bx.cx * w,
            cy: bx.cy * h,
            w: bx.w * w,
            h: bx.h * h,
        }
        .corners()
    };
    let (ca, cb) = (scale(a), scale(b));
    let inter = intersection_area(&ca, &cb);
    let union = ca.area() + cb.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Average precision per class and threshold over a full dataset.
pub fn evaluate_ap(images: &[EvalImage], iou_thresholds: &[f64]) -> ApReport {
    let mut classes: Vec<usize> = images
        .iter()
        .flat_map(|i| i.ground_truth.iter().map(|g| g.class_id))
        .collect();
    classes.sort_unstable();
    classes.dedup();

    let mut ap_per_iou = BTreeMap::new();
    let mut per_class_acc: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for &threshold in iou_thresholds {
        let mut class_aps = Vec::new();
        for &class in &classes {
            let ap = class_ap(images, class, threshold);
            per_class_acc.entry(class).or_default().push(ap);
            class_aps.push(ap);
        }
        if !class_aps.is_empty() {
            ap_per_iou.insert(
                format!("{threshold:.2}"),
                class_aps.iter().sum::<f64>() / class_aps.len() as f64,
            );
        }
    }

    let mean_ap = if ap_per_iou.is_empty() {
        None
    } else {
        Some(ap_per_iou.values().sum::<f64>() / ap_per_iou.len() as f64)
    };
    let ap50 = ap_per_iou.get("0.50").copied();
    let per_class = per_class_acc
        .into_iter()
        .map(|(c, aps)| (c, aps.iter().sum::<f64>() / aps.len() as f64))
        .collect();
    ApReport {
        ap_per_iou,
        mean_ap,
        ap50,
        per_class,
    }
}

/// Greedy matching at one threshold for one class, then 101-point AP.
fn class_ap(images: &[EvalImage], class: usize, threshold: f64) -> f64 {
    // Globally score-sorted; exact score ties break on detection content
    // (then position as a final fallback), so reordering an input list of
    // distinct detections cannot change the ranking.
    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    let mut total_gt = 0usize;
    for (ii, img) in images.iter().enumerate() {
        total_gt += img.ground_truth.iter().filter(|g| g.class_id == class).count();
        for (di, d) in img.detections.iter().enumerate() {
            if d.class_id == class {
                ranked.push((d.score, ii, di));
            }
        }
    }
    if total_gt == 0 {
        return 0.0;
    }
    let content_key = |&(_, ii, di): &(f64, usize, usize)| {
        let b = images[ii].detections[di].bbox;
        (ii, [b.cx, b.cy, b.w, b.h])
    };
    ranked.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then_with(|| {
                let (ia, ka) = content_key(a);
                let (ib, kb) = content_key(b);
                ia.cmp(&ib).then(ka.partial_cmp(&kb).unwrap())
            })
            .then(a.2.cmp(&b.2))
    });

    let mut gt_used: Vec<Vec<bool>> = images
        .iter()
        .map(|i| vec![false; i.ground_truth.len()])
        .collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(ranked.len()); // (recall, precision)
    for (_, ii, di) in ranked {
        let img = &images[ii];
        let det = &img.detections[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in img.ground_truth.iter().enumerate() {
            if gt.class_id != class || gt_used[ii][gi] {
                continue;
            }
            let iou = iou_pixels(&det.bbox, &gt.bbox, img.size);
            if iou >= threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, _)) => {
                gt_used[ii][gi] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        curve.push((tp as f64 / total_gt as f64, tp as f64 / (tp + fp) as f64));
    }

    interp_ap_101(&curve)
}

/// 101-point interpolated AP: mean over recall grid {0, 0.01, .., 1} of the
/// precision envelope max_{r' >= r} precision(r').
fn interp_ap_101(curve: &[(f64, f64)]) -> f64 {
    if curve.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let p = curve
            .iter()
            .filter(|(recall, _)| *recall >= r - 1e-12)
            .map(|&(_, p)| p)
            .fold(0.0, f64::max);
        total += p;
    }
    total / 101.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(class_id: usize, cx: f64, cy: f64, w: f64, h: f64) -> GroundTruthObject {
        GroundTruthObject {
            class_id,
            bbox: BoxCxcywh::new(cx, cy, w, h),
        }
    }

    fn det(class_id: usize, cx: f64, cy: f64, w: f64, h: f64, score: f64) -> Detection {
        Detection {
            class_id,
            bbox: BoxCxcywh::new(cx, cy, w, h),
            score,
        }
    }

    #[test]
    fn perfect_predictions_score_one_everywhere() {
        let images: Vec<EvalImage> = (0..4)
            .map(|i| {
                let g = vec![gt(i % 2, 0.4, 0.4, 0.2, 0.3), gt(2, 0.7, 0.7, 0.2, 0.2)];
                EvalImage {
                    size: (64, 64),
                    detections: g
                        .iter()
                        .map(|o| det(o.class_id, o.bbox.cx, o.bbox.cy, o.bbox.w, o.bbox.h, 1.0))
                        .collect(),
                    ground_truth: g,
                }
            })
            .collect();
        let r = evaluate_ap(&images, &coco_thresholds());
        assert_eq!(r.mean_ap, Some(1.0));
        assert_eq!(r.ap50, Some(1.0));
        assert!(r.per_class.values().all(|&v| v == 1.0));
    }

    #[test]
    fn no_predictions_scores_zero() {
        let images = vec![EvalImage {
            size: (64, 64),
            ground_truth: vec![gt(0, 0.5, 0.5, 0.2, 0.2)],
            detections: vec![],
        }];
        let r = evaluate_ap(&images, &coco_thresholds());
        assert_eq!(r.mean_ap, Some(0.0));
    }

    #[test]
    fn no_ground_truth_reports_absent() {
        let images = vec![EvalImage {
            size: (64, 64),
            ground_truth: vec![],
            detections: vec![det(0, 0.5, 0.5, 0.2, 0.2, 0.9)],
        }];
        let r = evaluate_ap(&images, &coco_thresholds());
        assert_eq!(r.mean_ap, None);
        assert_eq!(r.ap50, None);
        assert!(r.ap_per_iou.is_empty());
    }

    #[test]
    fn true_then_false_positive_gives_full_ap_and_swapped_half() {
        // One GT; a perfect detection at score 0.9 plus a stray at 0.8.
        let mk = |true_score: f64, false_score: f64| {
            vec![EvalImage {
                size: (100, 100),
                ground_truth: vec![gt(0, 0.3, 0.3, 0.2, 0.2)],
                detections: vec![
                    det(0, 0.3, 0.3, 0.2, 0.2, true_score),
                    det(0, 0.8, 0.8, 0.1, 0.1, false_score),
                ],
            }]
        };
        let r = evaluate_ap(&mk(0.9, 0.8), &[0.5]);
        assert_eq!(r.ap_per_iou["0.50"], 1.0);

        // Swap scores: the false positive ranks first, precision envelope 0.5.
        let r = evaluate_ap(&mk(0.8, 0.9), &[0.5]);
        assert!((r.ap_per_iou["0.50"] - 0.5).abs() < 0.01, "{}", r.ap_per_iou["0.50"]);
    }

    #[test]
    fn prediction_order_does_not_matter_at_equal_scores() {
        let base = EvalImage {
            size: (64, 64),
            ground_truth: vec![gt(0, 0.3, 0.3, 0.2, 0.2), gt(0, 0.7, 0.7, 0.2, 0.2)],
            detections: vec![
                det(0, 0.3, 0.3, 0.2, 0.2, 0.5),
                det(0, 0.7, 0.7, 0.2, 0.2, 0.5),
                det(0, 0.1, 0.9, 0.1, 0.1, 0.5),
            ],
        };
        let r1 = evaluate_ap(&[base.clone()], &coco_thresholds());
        let mut swapped = base.clone();
        swapped.detections.reverse();
        let r2 = evaluate_ap(&[swapped], &coco_thresholds());
        assert_eq!(r1.mean_ap, r2.mean_ap);
    }

    #[test]
    fn detections_drop_no_object_argmax() {
        let logits = Tensor::from_vec(
            vec![2, 3],
            vec![
                5.0, 0.0, 0.0, // foreground class 0
                0.0, 0.0, 5.0, // no-object wins -> dropped
            ],
        )
        .unwrap();
        let boxes = Tensor::from_vec(vec![2, 4], vec![0.5; 8]).unwrap();
        let out = DetectionOutput {
            boxes,
            class_logits: logits,
            det_embeddings: Tensor::zeros(&[2, 2]),
            attention: None,
        };
        let dets = detections_from_output(&out, 2);
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].class_id, 0);
        assert!(dets[0].score > 0.9);
    }
}
