//! COCO-style average precision at a single IoU threshold.
//!
//! Detections are matched greedily per image in score order to the
//! highest-IoU unmatched ground truth. For a size bucket, ground truth outside
//! the bucket is ignored: a detection matched to it, or an unmatched detection
//! outside the bucket, counts neither way. Precision is made monotone from the
//! right and sampled at 101 recall points.

use renorm_core::kdn::{BBox, ObjectAnnotation};
use serde::{Deserialize, Serialize};

use crate::decode::Detection;
use crate::error::{HarnessError, Result};

/// Longer-side limits in pixels between small, medium and large.
pub const SIZE_BUCKETS: [f64; 2] = [16.0, 32.0];

const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub ap50: Option<f64>,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub num_gt: usize,
    pub num_detections: usize,
}

pub fn evaluate_ap(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<ObjectAnnotation>],
    iou: f64,
) -> Result<ApReport> {
    if detections.len() != ground_truth.len() {
        return Err(HarnessError::Format(format!(
            "{} detection lists for {} images",
            detections.len(),
            ground_truth.len()
        )));
    }
    let inf = f64::INFINITY;
    let bucket = |lo: f64, hi: f64| average_precision(detections, ground_truth, iou, lo, hi);
    Ok(ApReport {
        ap50: bucket(0.0, inf),
        ap_small: bucket(0.0, SIZE_BUCKETS[0]),
        ap_medium: bucket(SIZE_BUCKETS[0], SIZE_BUCKETS[1]),
        ap_large: bucket(SIZE_BUCKETS[1], inf),
        num_gt: ground_truth.iter().map(Vec::len).sum(),
        num_detections: detections.iter().map(Vec::len).sum(),
    })
}

/// AP over objects whose longer side lies in `[lo, hi)`; `None` when there
/// are no such objects.
pub fn average_precision(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<ObjectAnnotation>],
    iou: f64,
    lo: f64,
    hi: f64,
) -> Option<f64> {
    let in_range = |b: &BBox| (lo..hi).contains(&b.max_side());
    let mut scored: Vec<(f64, bool)> = Vec::new();
    let mut positives = 0usize;

    for (dets, gts) in detections.iter().zip(ground_truth) {
        // in-range ground truth first so it wins over ignored boxes
        let mut gt: Vec<(BBox, bool)> = gts.iter().map(|a| (a.bbox, !in_range(&a.bbox))).collect();
        gt.sort_by_key(|&(_, ignored)| ignored);
        positives += gt.iter().filter(|g| !g.1).count();

        let mut order: Vec<&Detection> = dets.iter().collect();
        order.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut taken = vec![false; gt.len()];
        for d in order {
            let mut best: Option<usize> = None;
            let mut best_iou = iou.min(1.0 - 1e-10);
            for (k, (g, ignored)) in gt.iter().enumerate() {
                if taken[k] {
                    continue;
                }
                if let Some(b) = best {
                    if !gt[b].1 && *ignored {
                        break;
                    }
                }
                let v = d.bbox.iou(g);
                if v < best_iou {
                    continue;
                }
                best_iou = v;
                best = Some(k);
            }
            match best {
                Some(k) => {
                    taken[k] = true;
                    if !gt[k].1 {
                        scored.push((d.score, true));
                    }
                }
                None => {
                    if in_range(&d.bbox) {
                        scored.push((d.score, false));
                    }
                }
            }
        }
    }
    if positives == 0 {
        return None;
    }
    // stable: equal scores keep image order
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut recall = Vec::with_capacity(scored.len());
    let mut precision = Vec::with_capacity(scored.len());
    for &(_, hit) in &scored {
        if hit {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        recall.push(tp / positives as f64);
        precision.push(tp / (tp + fp));
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut total = 0.0;
    for r in 0..RECALL_POINTS {
        let target = r as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&x| x < target);
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    Some(total / RECALL_POINTS as f64)
}
