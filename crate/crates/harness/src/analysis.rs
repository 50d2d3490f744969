//! Saliency, interference and gradient-path analyses.

use renorm_core::autodiff::eval;
use renorm_core::kdn::{project_region, FactorSet, ObjectAnnotation};
use renorm_core::{Graph, Tensor};

use crate::decode::{decode, DecodeConfig, Detection};
use crate::detector::{ConnectionSetup, GradRoute, KdnFactors, ToyDetector, SHARED_PARAM, STRIDES};
use crate::error::{HarnessError, Result};
use crate::eval::{evaluate_ap, ApReport};
use crate::loss::LossConfig;
use crate::params::ParamStore;
use crate::scene::{Dataset, Scene};
use crate::targets::assign_level;
use crate::train::{image_step, targets_for};

/// Min-max normalisation to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize_saliency(map: &Tensor) -> Tensor {
    let d = map.data();
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range.is_nan() || range <= 0.0 {
        return Tensor::zeros(map.shape());
    }
    map.map(|v| (v - lo) / range).expect("finite input gives finite output")
}

/// `1×H×W` saliency per branch: channel max of the head input, normalised.
pub fn saliency_maps(branch_inputs: &[&Tensor]) -> Result<Vec<Tensor>> {
    branch_inputs
        .iter()
        .map(|t| Ok(normalize_saliency(&eval::channel_max(t)?)))
        .collect()
}

/// Per level: mean saliency inside the ground-truth boxes when the level
/// has assigned objects, otherwise mean saliency outside all boxes.
pub fn interference_metric(
    saliency: &[Tensor],
    annotations: &[ObjectAnnotation],
    strides: &[usize],
    thresholds: &[f64],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(saliency.len());
    for (l, (map, &stride)) in saliency.iter().zip(strides).enumerate() {
        let (h, w) = map.spatial()?;
        let mut inside = vec![false; h * w];
        for a in annotations {
            let r = project_region(&a.bbox, stride, h, w)?;
            for row in r.y..r.y + r.h {
                for col in r.x..r.x + r.w {
                    inside[row * w + col] = true;
                }
            }
        }
        let owns = annotations
            .iter()
            .any(|a| assign_level(a.bbox.max_side(), thresholds).min(strides.len() - 1) == l);
        let (mut sum, mut n) = (0.0, 0usize);
        for (&v, &m) in map.data().iter().zip(&inside) {
            if m == owns {
                sum += v;
                n += 1;
            }
        }
        out.push(if n == 0 { 0.0 } else { sum / n as f64 });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: ApReport,
    /// Mean over images, per level.
    pub interference: Vec<f64>,
    pub detections: Vec<Vec<Detection>>,
}

/// Output of one inference pass.
pub struct Prediction {
    pub detections: Vec<Detection>,
    pub saliency: Vec<Tensor>,
}

pub fn predict(
    det: &ToyDetector,
    params: &ParamStore,
    factor_set: Option<&FactorSet>,
    image: &Tensor,
    decode_cfg: &DecodeConfig,
) -> Result<Prediction> {
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let out = det.forward(
        &mut g,
        &bound,
        image,
        factor_set.map(KdnFactors::Infer),
        GradRoute::Full,
    )?;
    let cls: Vec<&Tensor> = out.cls.iter().map(|&v| g.value(v)).collect();
    let boxes: Vec<&Tensor> = out.boxes.iter().map(|&v| g.value(v)).collect();
    let detections = decode(&cls, &boxes, &STRIDES, det.image_size, decode_cfg);
    let inputs: Vec<&Tensor> = out.branch_inputs.iter().map(|&v| g.value(v)).collect();
    Ok(Prediction {
        detections,
        saliency: saliency_maps(&inputs)?,
    })
}

pub fn evaluate_detector(
    det: &ToyDetector,
    params: &ParamStore,
    factor_set: Option<&FactorSet>,
    data: &Dataset,
    decode_cfg: &DecodeConfig,
) -> Result<Evaluation> {
    let mut detections = Vec::with_capacity(data.len());
    let mut interference = vec![0.0; STRIDES.len()];
    for scene in &data.scenes {
        let p = predict(det, params, factor_set, &scene.image, decode_cfg)?;
        let m = interference_metric(&p.saliency, &scene.annotations, &STRIDES, &det.config.scale_thresholds)?;
        for (acc, v) in interference.iter_mut().zip(m) {
            *acc += v;
        }
        detections.push(p.detections);
    }
    for v in &mut interference {
        *v /= data.len().max(1) as f64;
    }
    let report = evaluate_ap(&detections, &data.annotations(), 0.5)?;
    Ok(Evaluation {
        report,
        interference,
        detections,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionReport {
    pub parameter: String,
    /// Gradient with every path.
    pub full: Tensor,
    /// Connection inputs detached.
    pub original: Tensor,
    /// Everything but the connection inputs detached.
    pub renormalized: Tensor,
    /// `max |full − (original + renormalized)|`.
    pub max_abs_residual: f64,
    /// `‖full‖ / ‖baseline‖` for the same parameters without a connection;
    /// absent when the baseline gradient vanishes.
    pub norm_ratio: Option<f64>,
}

/// Gradient of [`SHARED_PARAM`] summed over `batch`, split by path.
pub fn grad_decomposition_check(
    det: &ToyDetector,
    params: &ParamStore,
    batch: &[Scene],
    loss_cfg: &LossConfig,
) -> Result<DecompositionReport> {
    if !det.connection.has_basis_paths() {
        return Err(HarnessError::Decomposition(format!("{:?}", det.connection.kind)));
    }
    let baseline = ToyDetector::new(det.config.clone(), ConnectionSetup::baseline(), det.image_size)?;
    let shape = params.get(SHARED_PARAM)?.shape().to_vec();
    let mut sums = vec![vec![0.0; shape.iter().product()]; 4];
    for scene in batch {
        let targets = targets_for(det, &scene.annotations);
        let runs = [
            (det, GradRoute::Full),
            (det, GradRoute::DetachConnection),
            (det, GradRoute::DetachOriginal),
            (&baseline, GradRoute::Full),
        ];
        for (acc, (d, route)) in sums.iter_mut().zip(runs) {
            let step = image_step(d, params, scene, &targets, loss_cfg, route)?;
            for (a, g) in acc.iter_mut().zip(step.grads.get(SHARED_PARAM)?.data()) {
                *a += g;
            }
        }
    }
    let mut it = sums.into_iter().map(|v| Tensor::new(&shape, v));
    let full = it.next().expect("four sums")?;
    let original = it.next().expect("four sums")?;
    let renormalized = it.next().expect("four sums")?;
    let base = it.next().expect("four sums")?;
    let max_abs_residual = full
        .data()
        .iter()
        .zip(original.data())
        .zip(renormalized.data())
        .map(|((a, b), c)| (a - (b + c)).abs())
        .fold(0.0, f64::max);
    let bn = base.norm();
    Ok(DecompositionReport {
        parameter: SHARED_PARAM.to_string(),
        norm_ratio: (bn > 0.0).then(|| full.norm() / bn),
        full,
        original,
        renormalized,
        max_abs_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use renorm_core::kdn::BBox;

    #[test]
    fn constant_map_normalises_to_zero() {
        let t = normalize_saliency(&Tensor::full(&[1, 3, 3], 2.5));
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_hot_cell() {
        let mut m = Tensor::zeros(&[1, 4, 4]);
        m.set(&[0, 1, 2], 7.0);
        let t = normalize_saliency(&m);
        assert_eq!(t.at(&[0, 1, 2]), 1.0);
        assert_eq!(t.sum(), 1.0);
    }

    #[test]
    fn interference_examples() {
        let obj = ObjectAnnotation {
            bbox: BBox::new(0.0, 0.0, 6.0, 6.0),
            class_id: 0,
        };
        let zeros = vec![Tensor::zeros(&[1, 4, 4]), Tensor::zeros(&[1, 2, 2])];
        assert_eq!(
            interference_metric(&zeros, &[obj], &[4, 8], &[16.0]).unwrap(),
            vec![0.0, 0.0]
        );

        // box covers the left half of the coarse 2×2 map
        let half = ObjectAnnotation {
            bbox: BBox::new(0.0, 0.0, 8.0, 16.0),
            class_id: 0,
        };
        let ones = vec![Tensor::full(&[1, 4, 4], 1.0), Tensor::full(&[1, 2, 2], 1.0)];
        let m = interference_metric(&ones, &[half], &[4, 8], &[16.0]).unwrap();
        assert_eq!(m, vec![1.0, 1.0]);
    }
}
