//! SGD training with warm-up and step decay.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use renorm_core::kdn::{FactorSet, ObjectAnnotation, SalientStack};
use renorm_core::{Factors, Graph, Tensor, TensorError};
use serde::{Deserialize, Serialize};

use crate::analysis::{evaluate_detector, Evaluation};
use crate::decode::DecodeConfig;
use crate::detector::{Connection, GradRoute, KdnFactors, ToyDetector, STRIDES};
use crate::error::{HarnessError, Result};
use crate::loss::{detection_loss, LossConfig};
use crate::params::ParamStore;
use crate::scene::{Dataset, Scene};
use crate::targets::{assign_targets, Targets};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Share of all iterations spent on linear warm-up.
    pub warmup_fraction: f64,
    /// Epoch fractions after which the rate is multiplied by `lr_decay_factor`.
    pub lr_decay_points: [f64; 2],
    pub lr_decay_factor: f64,
    /// Evaluate on the test split after every epoch.
    pub eval_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_fraction: 0.05,
            lr_decay_points: [2.0 / 3.0, 11.0 / 12.0],
            lr_decay_factor: 0.1,
            eval_every_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(HarnessError::Config(format!("training: {m}")));
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail("lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail("weight_decay must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return fail("warmup_fraction must lie in [0, 1]");
        }
        let [a, b] = self.lr_decay_points;
        if !(0.0 <= a && a <= b && b <= 1.0) {
            return fail("lr_decay_points must satisfy 0 <= first <= second <= 1");
        }
        if !(self.lr_decay_factor >= 0.0 && self.lr_decay_factor.is_finite()) {
            return fail("lr_decay_factor must be finite and non-negative");
        }
        Ok(())
    }

    /// Rate for the 0-based `iter` within `epoch`, given `per_epoch` iterations.
    pub fn lr_at(&self, epoch: usize, iter: usize, per_epoch: usize) -> f64 {
        let mut lr = self.lr;
        for p in self.lr_decay_points {
            if epoch >= (p * self.epochs as f64).floor() as usize {
                lr *= self.lr_decay_factor;
            }
        }
        let total = self.epochs * per_epoch;
        let warm = (self.warmup_fraction * total as f64).ceil() as usize;
        let step = epoch * per_epoch + iter;
        if step < warm {
            lr *= (step + 1) as f64 / warm as f64;
        }
        lr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Rate used for the last step of the epoch.
    pub lr: f64,
    pub loss: f64,
    pub loss_cls: f64,
    pub loss_box: f64,
    pub evaluation: Option<EvalSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub ap50: Option<f64>,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    /// Per level P3..P6, averaged over test images.
    pub interference: Vec<f64>,
}

impl From<&Evaluation> for EvalSummary {
    fn from(e: &Evaluation) -> Self {
        Self {
            ap50: e.report.ap50,
            ap_small: e.report.ap_small,
            ap_medium: e.report.ap_medium,
            ap_large: e.report.ap_large,
            interference: e.interference.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub trajectory: Vec<EpochRecord>,
    /// Single-branch connection only: factors averaged over the last epoch.
    pub factor_set: Option<FactorSet>,
}

pub fn targets_for(det: &ToyDetector, annotations: &[ObjectAnnotation]) -> Targets {
    assign_targets(annotations, &STRIDES, &det.grids(), &det.config.scale_thresholds)
}

/// Loss values and parameter gradients of one image.
pub struct ImageStep {
    pub loss: f64,
    pub loss_cls: f64,
    pub loss_box: f64,
    pub grads: ParamStore,
    pub factors: Option<Factors>,
}

pub fn image_step(
    det: &ToyDetector,
    params: &ParamStore,
    scene: &Scene,
    targets: &Targets,
    loss_cfg: &LossConfig,
    route: GradRoute,
) -> Result<ImageStep> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let out = det.forward(
        &mut g,
        &bound,
        &scene.image,
        Some(KdnFactors::Train(&scene.annotations)),
        route,
    )?;
    let l = detection_loss(&mut g, &out, targets, loss_cfg)?;
    let values = (
        g.value(l.total).item()?,
        g.value(l.cls).item()?,
        g.value(l.boxes).item()?,
    );
    g.backward(l.total)?;
    Ok(ImageStep {
        loss: values.0,
        loss_cls: values.1,
        loss_box: values.2,
        grads: bound.gradients(&g, params)?,
        factors: out.factors,
    })
}

fn diverged(epoch: usize, step: usize) -> impl Fn(HarnessError) -> HarnessError {
    move |e| match e {
        HarnessError::Tensor(TensorError::NonFinite { op }) => HarnessError::Diverged {
            epoch,
            step,
            detail: format!("non-finite value produced by {op}"),
        },
        other => other,
    }
}

fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Factor set used for evaluation when KDN training saw no objects.
pub fn uniform_factor_set() -> FactorSet {
    FactorSet::new(Factors::uniform(3), 0)
}

pub fn train(
    det: &ToyDetector,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    decode_cfg: &DecodeConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    let mut params = det.init_params(seed);
    let mut velocity: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    let targets: Vec<Targets> = train_set
        .scenes
        .iter()
        .map(|s| targets_for(det, &s.annotations))
        .collect();
    let kdn = det.connection.kind == Connection::SingleBranch;
    let per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let mut trajectory = Vec::with_capacity(cfg.epochs);
    let mut factor_set = None;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed(seed, epoch)));
        let mut stack = SalientStack::new(3);
        let (mut sum, mut sum_cls, mut sum_box) = (0.0, 0.0, 0.0);
        let mut lr = 0.0;

        for (it, batch) in order.chunks(cfg.batch_size).enumerate() {
            let wrap = diverged(epoch + 1, it);
            let mut acc: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
            for &i in batch {
                let step = image_step(
                    det,
                    &params,
                    &train_set.scenes[i],
                    &targets[i],
                    loss_cfg,
                    GradRoute::Full,
                )
                .map_err(&wrap)?;
                sum += step.loss;
                sum_cls += step.loss_cls;
                sum_box += step.loss_box;
                if let Some(f) = &step.factors {
                    stack.update(f)?;
                }
                for (a, (_, gt)) in acc.iter_mut().zip(step.grads.iter()) {
                    for (x, y) in a.iter_mut().zip(gt.data()) {
                        *x += y;
                    }
                }
            }
            lr = cfg.lr_at(epoch, it, per_epoch);
            let inv = 1.0 / batch.len() as f64;
            let names: Vec<String> = params.names().map(str::to_string).collect();
            for ((name, grad), v) in names.iter().zip(&acc).zip(&mut velocity) {
                let w = params.get_mut(name)?;
                let decay = if name.ends_with(".w") { cfg.weight_decay } else { 0.0 };
                let mut vd = v.data().to_vec();
                let mut wd = w.data().to_vec();
                for ((vk, wk), gk) in vd.iter_mut().zip(&mut wd).zip(grad) {
                    *vk = cfg.momentum * *vk + gk * inv + decay * *wk;
                    *wk -= lr * *vk;
                }
                if wd.iter().any(|x| !x.is_finite()) {
                    return Err(HarnessError::Diverged {
                        epoch: epoch + 1,
                        step: it,
                        detail: format!("parameter {name} became non-finite"),
                    });
                }
                *v = Tensor::new(v.shape(), vd)?;
                *w = Tensor::new(w.shape(), wd)?;
            }
        }

        if kdn {
            factor_set = stack.finalize().ok();
        }
        let n = train_set.len().max(1) as f64;
        let loss = sum / n;
        if !loss.is_finite() {
            return Err(HarnessError::Diverged {
                epoch: epoch + 1,
                step: per_epoch,
                detail: "epoch loss is not finite".into(),
            });
        }
        let evaluation = match (test_set, cfg.eval_every_epoch || epoch + 1 == cfg.epochs) {
            (Some(ts), true) => {
                let fs = factor_set.clone().unwrap_or_else(uniform_factor_set);
                let e = evaluate_detector(det, &params, kdn.then_some(&fs), ts, decode_cfg)?;
                Some(EvalSummary::from(&e))
            }
            _ => None,
        };
        trajectory.push(EpochRecord {
            epoch: epoch + 1,
            lr,
            loss,
            loss_cls: sum_cls / n,
            loss_box: sum_box / n,
            evaluation,
        });
    }
    Ok(TrainOutcome {
        params,
        trajectory,
        factor_set,
    })
}
