//! Knowledge discovery over a feature cascade.
//!
//! Per image: reduce every level to a spatial salience map (max across
//! channels), project each object box onto it, take the most salient value in
//! the projected region, average over objects, and turn the per-level averages
//! into factors with `λ = L·softmax(λᵉ)` where `L` is the number of levels.
//! Factors from all training images are averaged into the inference set; a
//! level with `λ ≥ 1` is relevant and survives the inference-time fusion.

use serde::{Deserialize, Serialize};

use crate::algebra::{align_levels, Factors, FeatureCascade};
use crate::autodiff::{eval, softmax_values, Graph, Var};
use crate::error::KdnError;
use crate::tensor::Tensor;

/// Axis-aligned box in image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn max_side(&self) -> f64 {
        self.w.max(self.h)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        inter / (self.area() + other.area() - inter)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: usize,
}

/// Cell rectangle on a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// Projects an image-space box onto a map with the given stride and size.
/// Covers every cell the box touches, keeps at least one cell per side and
/// clips to the map.
pub fn project_region(bbox: &BBox, stride: usize, map_h: usize, map_w: usize) -> Result<Region, KdnError> {
    if stride == 0 {
        return Err(KdnError::Stride);
    }
    let s = stride as f64;
    let axis = |lo: f64, len: f64, limit: usize| -> Option<(usize, usize)> {
        let start = (lo / s).floor().max(0.0);
        let end = ((lo + len) / s).ceil().min(limit as f64);
        if start >= limit as f64 || lo + len <= 0.0 {
            return None;
        }
        let start = start as usize;
        let end = (end as usize).max(start + 1).min(limit);
        Some((start, end - start))
    };
    match (axis(bbox.x, bbox.w, map_w), axis(bbox.y, bbox.h, map_h)) {
        (Some((x, w)), Some((y, h))) => Ok(Region { x, y, w, h }),
        _ => Err(KdnError::OutsideMap(bbox.as_array())),
    }
}

/// Object-region salient pooling: max of `map` (`1×H×W`) over `region`.
pub fn orsp(map: &Tensor, region: &Region) -> Result<f64, KdnError> {
    let [_, _, h, w] = map.nchw()?;
    if region.w == 0 || region.h == 0 {
        return Err(KdnError::EmptyRegion);
    }
    if region.x + region.w > w || region.y + region.h > h {
        return Err(KdnError::OutsideMap([
            region.x as f64,
            region.y as f64,
            region.w as f64,
            region.h as f64,
        ]));
    }
    let d = map.data();
    let mut best = f64::NEG_INFINITY;
    for r in region.y..region.y + region.h {
        for c in region.x..region.x + region.w {
            best = best.max(d[r * w + c]);
        }
    }
    Ok(best)
}

/// Mean salient value per level over `objects`; `None` when there are no objects.
pub fn salient_expectations(
    cascade: &FeatureCascade,
    objects: &[ObjectAnnotation],
) -> Result<Option<Vec<f64>>, KdnError> {
    if objects.is_empty() {
        return Ok(None);
    }
    let mut out = Vec::with_capacity(cascade.degrees_of_freedom());
    for (level, &stride) in cascade.levels().iter().zip(cascade.strides()) {
        let rm = eval::channel_max(level)?;
        let (h, w) = rm.spatial()?;
        let mut total = 0.0;
        for obj in objects {
            let region = project_region(&obj.bbox, stride, h, w)?;
            total += orsp(&rm, &region)?;
        }
        out.push(total / objects.len() as f64);
    }
    Ok(Some(out))
}

/// `λ = L·softmax(λᵉ)`; sums to the number of levels.
pub fn factors_from_expectations(expectations: &[f64]) -> Factors {
    let l = expectations.len() as f64;
    Factors(softmax_values(expectations).into_iter().map(|p| l * p).collect())
}

/// Per-image factors; `Ok(None)` for an image without objects.
pub fn image_factors(cascade: &FeatureCascade, objects: &[ObjectAnnotation]) -> Result<Option<Factors>, KdnError> {
    Ok(salient_expectations(cascade, objects)?.map(|e| factors_from_expectations(&e)))
}

/// Running per-level sums of training-time factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalientStack {
    sums: Vec<f64>,
    count: usize,
}

impl SalientStack {
    pub fn new(levels: usize) -> Self {
        Self {
            sums: vec![0.0; levels],
            count: 0,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn update(&mut self, factors: &Factors) -> Result<(), KdnError> {
        if factors.len() != self.sums.len() {
            return Err(KdnError::Arity {
                expected: self.sums.len(),
                got: factors.len(),
            });
        }
        for (s, f) in self.sums.iter_mut().zip(factors.values()) {
            *s += f;
        }
        self.count += 1;
        Ok(())
    }

    pub fn finalize(&self) -> Result<FactorSet, KdnError> {
        if self.count == 0 {
            return Err(KdnError::EmptyStack);
        }
        let mean: Vec<f64> = self.sums.iter().map(|s| s / self.count as f64).collect();
        Ok(FactorSet::new(Factors(mean), self.count))
    }
}

/// Inference-time factors with relevance flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSet {
    pub lambda_infer: Factors,
    pub relevance: Vec<bool>,
    pub count: usize,
}

impl FactorSet {
    pub fn new(lambda_infer: Factors, count: usize) -> Self {
        let relevance = lambda_infer.values().iter().map(|&l| l >= 1.0).collect();
        Self {
            lambda_infer,
            relevance,
            count,
        }
    }

    pub fn relevant_levels(&self) -> Vec<usize> {
        self.relevance
            .iter()
            .enumerate()
            .filter_map(|(i, &r)| r.then_some(i))
            .collect()
    }
}

/// Training-time fusion `Σ λl·resize(p(Fl))` onto the finest grid.
pub fn fuse_train(
    g: &mut Graph,
    levels: &[Var],
    projections: Option<&[Var]>,
    factors: &Factors,
) -> Result<Var, KdnError> {
    if factors.len() != levels.len() {
        return Err(KdnError::Arity {
            expected: levels.len(),
            got: factors.len(),
        });
    }
    let aligned = align_levels(g, levels, 0, projections)?;
    let terms: Vec<(Var, f64)> = aligned.into_iter().zip(factors.values().iter().copied()).collect();
    Ok(g.linear_combination(&terms)?)
}

/// Inference-time fusion over relevant levels only.
pub fn fuse_infer(
    g: &mut Graph,
    levels: &[Var],
    projections: Option<&[Var]>,
    factor_set: &FactorSet,
) -> Result<Var, KdnError> {
    let lambda = factor_set.lambda_infer.values();
    if lambda.len() != levels.len() {
        return Err(KdnError::Arity {
            expected: levels.len(),
            got: lambda.len(),
        });
    }
    let relevant = factor_set.relevant_levels();
    if relevant.is_empty() {
        return Err(KdnError::NoRelevantLevel(lambda.to_vec()));
    }
    let aligned = align_levels(g, levels, 0, projections)?;
    let terms: Vec<(Var, f64)> = relevant.iter().map(|&i| (aligned[i], lambda[i])).collect();
    Ok(g.linear_combination(&terms)?)
}
