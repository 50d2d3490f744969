//! Scale-based level assignment and centre-cell targets.

use renorm_core::kdn::ObjectAnnotation;
use renorm_core::Tensor;

/// One pyramid level's training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTargets {
    pub stride: usize,
    /// `1×H×W`, 1 at positive cells.
    pub cls: Tensor,
    /// `4×H×W`: centre offsets in cells and log size in strides.
    pub boxes: Tensor,
    /// Length `4·H·W`; true on the box channels of positive cells.
    pub box_mask: Vec<bool>,
    /// Object indices whose positive cell lives on this level.
    pub objects: Vec<usize>,
}

impl LevelTargets {
    pub fn positives(&self) -> usize {
        self.objects.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub levels: Vec<LevelTargets>,
    /// Objects that lost their cell to an earlier, smaller object on the same level.
    pub dropped: Vec<usize>,
}

impl Targets {
    pub fn positives(&self) -> usize {
        self.levels.iter().map(LevelTargets::positives).sum()
    }
}

/// First level whose threshold exceeds the object's longer side; the
/// coarsest level takes everything else.
pub fn assign_level(max_side: f64, thresholds: &[f64]) -> usize {
    thresholds
        .iter()
        .position(|&t| max_side < t)
        .unwrap_or(thresholds.len())
}

/// Encodes a box relative to cell `(row, col)` of a level with `stride`.
pub fn encode_box(obj: &ObjectAnnotation, stride: usize, row: usize, col: usize) -> [f64; 4] {
    let s = stride as f64;
    let (cx, cy) = obj.bbox.center();
    [
        cx / s - (col as f64 + 0.5),
        cy / s - (row as f64 + 0.5),
        (obj.bbox.w / s).ln(),
        (obj.bbox.h / s).ln(),
    ]
}

/// `grids[l]` is the `(H, W)` of level `l`; `thresholds` has one entry fewer
/// than there are levels.
pub fn assign_targets(
    annotations: &[ObjectAnnotation],
    strides: &[usize],
    grids: &[(usize, usize)],
    thresholds: &[f64],
) -> Targets {
    assert_eq!(strides.len(), grids.len());
    assert_eq!(thresholds.len() + 1, strides.len());
    let mut levels: Vec<LevelTargets> = strides
        .iter()
        .zip(grids)
        .map(|(&stride, &(h, w))| LevelTargets {
            stride,
            cls: Tensor::zeros(&[1, h, w]),
            boxes: Tensor::zeros(&[4, h, w]),
            box_mask: vec![false; 4 * h * w],
            objects: Vec::new(),
        })
        .collect();

    // smaller objects claim contested cells first
    let mut order: Vec<usize> = (0..annotations.len()).collect();
    order.sort_by(|&a, &b| {
        annotations[a]
            .bbox
            .area()
            .total_cmp(&annotations[b].bbox.area())
            .then(a.cmp(&b))
    });

    let mut dropped = Vec::new();
    for idx in order {
        let obj = &annotations[idx];
        let l = assign_level(obj.bbox.max_side(), thresholds).min(levels.len() - 1);
        let lt = &mut levels[l];
        let (h, w) = (lt.cls.shape()[1], lt.cls.shape()[2]);
        let s = lt.stride as f64;
        let (cx, cy) = obj.bbox.center();
        let col = ((cx / s).floor().max(0.0) as usize).min(w - 1);
        let row = ((cy / s).floor().max(0.0) as usize).min(h - 1);
        if lt.cls.at(&[0, row, col]) > 0.0 {
            dropped.push(idx);
            continue;
        }
        lt.cls.set(&[0, row, col], 1.0);
        for (k, v) in encode_box(obj, lt.stride, row, col).into_iter().enumerate() {
            lt.boxes.set(&[k, row, col], v);
            lt.box_mask[(k * h + row) * w + col] = true;
        }
        lt.objects.push(idx);
    }
    for lt in &mut levels {
        lt.objects.sort_unstable();
    }
    dropped.sort_unstable();
    Targets { levels, dropped }
}
