//! Detection loss: sigmoid focal loss on every cell plus smooth-L1 on the
//! box channels of positive cells, both divided by `max(1, positives)`.

use renorm_core::{Graph, Var};
use serde::{Deserialize, Serialize};

use crate::detector::ForwardPass;
use crate::error::{HarnessError, Result};
use crate::targets::Targets;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub box_weight: f64,
    /// Smooth-L1 transition point.
    pub box_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            box_weight: 1.0,
            box_beta: 0.11,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.focal_alpha >= 0.0
            && self.focal_gamma >= 0.0
            && self.box_weight >= 0.0
            && self.box_beta > 0.0
            && [self.focal_alpha, self.focal_gamma, self.box_weight, self.box_beta]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(HarnessError::Config(
                "loss: alpha, gamma and box_weight must be finite and non-negative, box_beta positive".into(),
            ))
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub cls: Var,
    pub boxes: Var,
}

pub fn detection_loss(g: &mut Graph, out: &ForwardPass, targets: &Targets, cfg: &LossConfig) -> Result<LossVars> {
    let norm = targets.positives().max(1) as f64;
    let mut cls_terms = Vec::with_capacity(targets.levels.len());
    let mut box_terms = Vec::with_capacity(targets.levels.len());
    for (l, t) in targets.levels.iter().enumerate() {
        let c = g.focal_loss(out.cls[l], &t.cls, cfg.focal_alpha, cfg.focal_gamma, norm)?;
        cls_terms.push((c, 1.0));
        let b = g.smooth_l1(out.boxes[l], &t.boxes, &t.box_mask, cfg.box_beta, norm)?;
        box_terms.push((b, 1.0));
    }
    let cls = g.linear_combination(&cls_terms)?;
    let boxes = g.linear_combination(&box_terms)?;
    let total = g.linear_combination(&[(cls, 1.0), (boxes, cfg.box_weight)])?;
    Ok(LossVars { total, cls, boxes })
}

/// Scalar focal loss of one cell, written out directly.
pub fn focal_term(logit: f64, target: f64, alpha: f64, gamma: f64) -> f64 {
    let p = 1.0 / (1.0 + (-logit).exp());
    let pt = if target > 0.5 { p } else { 1.0 - p };
    -alpha * (1.0 - pt).powf(gamma) * pt.ln()
}
