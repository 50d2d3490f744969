//! Turning head outputs into scored boxes.

use renorm_core::kdn::BBox;
use renorm_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    pub class_id: usize,
    pub source_level: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_detections: 100,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if (0.0..=1.0).contains(&self.score_threshold) && (0.0..=1.0).contains(&self.nms_iou) {
            Ok(())
        } else {
            Err(HarnessError::Config(
                "decode: score_threshold and nms_iou must lie in [0, 1]".into(),
            ))
        }
    }
}

/// Clips `b` to `[0, size]²`; `None` when nothing is left.
pub fn clip_box(b: BBox, size: f64) -> Option<BBox> {
    let x0 = b.x.clamp(0.0, size);
    let y0 = b.y.clamp(0.0, size);
    let x1 = (b.x + b.w).clamp(0.0, size);
    let y1 = (b.y + b.h).clamp(0.0, size);
    (x1 > x0 && y1 > y0).then(|| BBox::new(x0, y0, x1 - x0, y1 - y0))
}

/// Inverse of the target encoding for cell `(row, col)`.
pub fn decode_box(code: [f64; 4], stride: usize, row: usize, col: usize) -> BBox {
    let s = stride as f64;
    let cx = (col as f64 + 0.5 + code[0]) * s;
    let cy = (row as f64 + 0.5 + code[1]) * s;
    // keep exp finite for wild early-training outputs
    let w = code[2].clamp(-10.0, 10.0).exp() * s;
    let h = code[3].clamp(-10.0, 10.0).exp() * s;
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, w, h)
}

/// Score-sorted greedy non-maximum suppression. Ties keep input order.
pub fn nms(mut dets: Vec<Detection>, iou: f64, max_keep: usize) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<Detection> = Vec::new();
    for d in dets {
        if keep.len() >= max_keep {
            break;
        }
        if keep
            .iter()
            .all(|k| k.class_id != d.class_id || k.bbox.iou(&d.bbox) <= iou)
        {
            keep.push(d);
        }
    }
    keep
}

/// `cls[l]` is `1×H×W` logits and `boxes[l]` is `4×H×W`, for levels with `strides[l]`.
pub fn decode(
    cls: &[&Tensor],
    boxes: &[&Tensor],
    strides: &[usize],
    image_size: usize,
    cfg: &DecodeConfig,
) -> Vec<Detection> {
    let mut dets = Vec::new();
    for (l, ((c, b), &s)) in cls.iter().zip(boxes).zip(strides).enumerate() {
        let (h, w) = (c.shape()[1], c.shape()[2]);
        let bd = b.data();
        for (i, &z) in c.data().iter().enumerate() {
            let score = 1.0 / (1.0 + (-z).exp());
            if score < cfg.score_threshold {
                continue;
            }
            let (row, col) = (i / w, i % w);
            let code = [0, 1, 2, 3].map(|k| bd[(k * h + row) * w + col]);
            if let Some(bbox) = clip_box(decode_box(code, s, row, col), image_size as f64) {
                dets.push(Detection {
                    bbox,
                    score,
                    class_id: 0,
                    source_level: l,
                });
            }
        }
    }
    nms(dets, cfg.nms_iou, cfg.max_detections)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::encode_box;
    use renorm_core::kdn::ObjectAnnotation;

    #[test]
    fn encode_decode_round_trip() {
        let obj = ObjectAnnotation {
            bbox: BBox::new(10.0, 21.0, 6.0, 5.0),
            class_id: 0,
        };
        let code = encode_box(&obj, 4, 5, 3);
        let back = decode_box(code, 4, 5, 3);
        for (a, b) in back.as_array().iter().zip(obj.bbox.as_array()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn nms_suppresses_overlaps() {
        let d = |x: f64, score: f64| Detection {
            bbox: BBox::new(x, 0.0, 10.0, 10.0),
            score,
            class_id: 0,
            source_level: 0,
        };
        let kept = nms(vec![d(0.0, 0.5), d(1.0, 0.9), d(30.0, 0.2)], 0.5, 100);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].score, 0.9);
        assert_eq!(kept[1].score, 0.2);
        assert_eq!(nms(vec![d(0.0, 0.5), d(30.0, 0.2)], 0.5, 1).len(), 1);
    }

    #[test]
    fn clipping() {
        assert_eq!(
            clip_box(BBox::new(-2.0, 90.0, 6.0, 10.0), 96.0),
            Some(BBox::new(0.0, 90.0, 4.0, 6.0))
        );
        assert_eq!(clip_box(BBox::new(100.0, 0.0, 5.0, 5.0), 96.0), None);
    }

    #[test]
    fn threshold_filters_cells() {
        let cls = Tensor::new(&[1, 1, 2], vec![3.0, -5.0]).unwrap();
        let boxes = Tensor::zeros(&[4, 1, 2]);
        let dets = decode(&[&cls], &[&boxes], &[8], 16, &DecodeConfig::default());
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].bbox, BBox::new(0.0, 0.0, 8.0, 8.0));
    }
}
