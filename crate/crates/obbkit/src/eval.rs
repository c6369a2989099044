//! Oriented-box detection evaluation: greedy per-image matching at a rotated
//! IoU threshold, average precision under 11-point (VOC07) or all-point
//! (VOC12) interpolation, and class-mean aggregation.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rotated_iou, OBB};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no classes to average")]
    EmptyClassMap,
    #[error("score {0} outside [0, 1]")]
    InvalidScore(f64),
}

/// One scored detection. JSON lines carry these as
/// `{"image_id": ..., "class_id": ..., "score": ..., "obb": [cx,cy,w,h,theta]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub class_id: usize,
    pub score: f64,
    pub obb: OBB,
}

impl Detection {
    pub fn new(image_id: String, class_id: usize, score: f64, obb: OBB) -> Result<Self, EvalError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(EvalError::InvalidScore(score));
        }
        Ok(Detection { image_id, class_id, score, obb })
    }
}

/// One ground-truth instance; difficult instances are excluded from both the
/// positive count and the false-positive penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct GtRecord {
    pub obb: OBB,
    pub class_id: usize,
    pub image_id: String,
    pub difficult: bool,
}

/// Precision/recall points in descending-score order; recall never decreases.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub points: Vec<(f64, f64)>,
    pub n_gt: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchFlag {
    TruePositive,
    FalsePositive,
    /// Only overlap above threshold was with a difficult instance.
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Aligned with the input detection order.
    pub flags: Vec<MatchFlag>,
    pub curve: PrCurve,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApMode {
    Voc07,
    Voc12,
}

/// Match single-class detections against single-class ground truths.
/// Detections are taken in descending score order (stable on ties) and each
/// claims the highest-IoU still-unmatched non-difficult ground truth in its
/// image.
pub fn match_detections(dets: &[Detection], gts: &[GtRecord], iou_thresh: f64) -> MatchResult {
    assert!(iou_thresh > 0.0 && iou_thresh < 1.0, "iou threshold must lie in (0, 1)");
    let mut by_image: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, gt) in gts.iter().enumerate() {
        by_image.entry(gt.image_id.as_str()).or_default().push(i);
    }
    let n_gt = gts.iter().filter(|g| !g.difficult).count();

    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));

    let mut matched = vec![false; gts.len()];
    let mut flags = vec![MatchFlag::FalsePositive; dets.len()];
    let mut points = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    for &di in &order {
        let det = &dets[di];
        let candidates = by_image.get(det.image_id.as_str()).map_or(&[][..], Vec::as_slice);
        let mut best: Option<(usize, f64)> = None;
        let mut difficult_hit = false;
        for &gi in candidates {
            let iou = rotated_iou(&det.obb, &gts[gi].obb);
            if gts[gi].difficult {
                difficult_hit |= iou >= iou_thresh;
            } else if !matched[gi] && best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, iou)) if iou >= iou_thresh => {
                matched[gi] = true;
                flags[di] = MatchFlag::TruePositive;
                tp += 1;
            }
            _ if difficult_hit => {
                flags[di] = MatchFlag::Ignored;
                continue; // neither TP nor FP; the curve does not advance
            }
            _ => {
                fp += 1;
            }
        }
        let recall = if n_gt > 0 { tp as f64 / n_gt as f64 } else { 0.0 };
        let precision = tp as f64 / (tp + fp) as f64;
        points.push((recall, precision));
    }
    MatchResult { flags, curve: PrCurve { points, n_gt } }
}

/// Average precision of a PR curve. VOC07 averages the max precision at the
/// 11 recall thresholds `{0, 0.1, .., 1}`; VOC12 integrates the monotonized
/// precision envelope. Zero ground truths define AP as 0.
pub fn average_precision(curve: &PrCurve, mode: ApMode) -> f64 {
    if curve.n_gt == 0 || curve.points.is_empty() {
        return 0.0;
    }
    match mode {
        ApMode::Voc07 => {
            let mut sum = 0.0;
            for k in 0..=10 {
                let t = k as f64 / 10.0;
                sum += curve
                    .points
                    .iter()
                    .filter(|(r, _)| *r >= t)
                    .map(|(_, p)| *p)
                    .fold(0.0, f64::max);
            }
            sum / 11.0
        }
        ApMode::Voc12 => {
            let mut pts = curve.points.clone();
            for i in (0..pts.len().saturating_sub(1)).rev() {
                pts[i].1 = pts[i].1.max(pts[i + 1].1);
            }
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            for (r, p) in pts {
                if r > prev_recall {
                    ap += (r - prev_recall) * p;
                    prev_recall = r;
                }
            }
            ap
        }
    }
}

/// Arithmetic mean over the classes present.
pub fn mean_ap(per_class_ap: &BTreeMap<usize, f64>) -> Result<f64, EvalError> {
    if per_class_ap.is_empty() {
        return Err(EvalError::EmptyClassMap);
    }
    Ok(per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64)
}

/// Per-class AP over every class appearing in either input.
pub fn evaluate_classes(
    dets: &[Detection],
    gts: &[GtRecord],
    iou_thresh: f64,
    mode: ApMode,
) -> BTreeMap<usize, f64> {
    let mut classes: Vec<usize> =
        dets.iter().map(|d| d.class_id).chain(gts.iter().map(|g| g.class_id)).collect();
    classes.sort_unstable();
    classes.dedup();
    classes
        .into_iter()
        .map(|class_id| {
            let cd: Vec<Detection> =
                dets.iter().filter(|d| d.class_id == class_id).cloned().collect();
            let cg: Vec<GtRecord> =
                gts.iter().filter(|g| g.class_id == class_id).cloned().collect();
            let result = match_detections(&cd, &cg, iou_thresh);
            (class_id, average_precision(&result.curve, mode))
        })
        .collect()
}

/// The `0.5:0.05:0.95` threshold grid.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + i as f64 * 0.05).collect()
}

/// Mean over classes of the mean AP across IoU thresholds.
pub fn mean_ap_over_thresholds(
    dets: &[Detection],
    gts: &[GtRecord],
    thresholds: &[f64],
    mode: ApMode,
) -> Result<f64, EvalError> {
    let mut acc = 0.0;
    for &t in thresholds {
        acc += mean_ap(&evaluate_classes(dets, gts, t, mode))?;
    }
    Ok(acc / thresholds.len() as f64)
}
