//! Finite-difference check of the whole detector loss.
//!
//! Two views per parameter tensor:
//! * elementwise central differences, the strict check; entries whose true
//!   gradient is within a few thousand ulps of the loss divided by `h` are
//!   below what a double-precision difference can resolve, so they are
//!   counted separately instead of being folded into the maximum;
//! * directional derivatives along random directions, which are large enough
//!   that rounding in the loss never dominates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use renorm_core::gradcheck::central_difference;
use renorm_core::kdn::FactorSet;
use renorm_core::{Graph, Tensor};

use crate::detector::{GradRoute, KdnFactors, ToyDetector};
use crate::error::Result;
use crate::loss::{detection_loss, LossConfig};
use crate::params::ParamStore;
use crate::scene::Scene;
use crate::targets::Targets;
use crate::train::targets_for;

/// Relative tolerance the resolution floor is derived for.
const TOLERANCE: f64 = 1e-4;
/// Rounding error of one loss evaluation, in ulps of the loss.
const LOSS_ULPS: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub scalars: usize,
    /// Largest `|a − n| / (|n| + 1e-8)` over resolvable entries.
    pub max_relative_error: f64,
    /// Entries with `|n|` below the resolution floor.
    pub unresolved: usize,
    /// Entries over the relative tolerance, resolvable or not.
    pub strict_failures: usize,
    /// Largest `|a − n|` over the unresolved entries.
    pub unresolved_max_abs_error: f64,
    /// Largest relative error of the directional derivatives.
    pub directional_relative_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub loss: f64,
    /// Gradient magnitude below which a central difference with step `h`
    /// cannot reach the tolerance.
    pub resolution_floor: f64,
    pub params: Vec<ParamCheck>,
}

impl GradientReport {
    pub fn max_relative_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_relative_error).fold(0.0, f64::max)
    }

    pub fn max_directional_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.directional_relative_error)
            .fold(0.0, f64::max)
    }

    /// Largest absolute disagreement a central difference can produce from
    /// rounding alone.
    pub fn rounding_bound(&self) -> f64 {
        self.resolution_floor * TOLERANCE
    }

    pub fn max_unresolved_abs_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.unresolved_max_abs_error)
            .fold(0.0, f64::max)
    }

    pub fn unresolved(&self) -> usize {
        self.params.iter().map(|p| p.unresolved).sum()
    }

    pub fn strict_failures(&self) -> usize {
        self.params.iter().map(|p| p.strict_failures).sum()
    }

    pub fn scalars(&self) -> usize {
        self.params.iter().map(|p| p.scalars).sum()
    }
}

struct Problem<'a> {
    det: &'a ToyDetector,
    scene: &'a Scene,
    targets: Targets,
    loss_cfg: &'a LossConfig,
    factor_set: Option<&'a FactorSet>,
}

impl Problem<'_> {
    fn eval(&self, params: &ParamStore, with_grads: bool) -> Result<(f64, Option<ParamStore>)> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        // factors are held fixed: the check is of the tape, not of the factor pipeline
        let kdn = self.factor_set.map(KdnFactors::Infer);
        let out = self
            .det
            .forward(&mut g, &bound, &self.scene.image, kdn, GradRoute::Full)?;
        let l = detection_loss(&mut g, &out, &self.targets, self.loss_cfg)?;
        let value = g.value(l.total).item()?;
        if !with_grads {
            return Ok((value, None));
        }
        g.backward(l.total)?;
        Ok((value, Some(bound.gradients(&g, params)?)))
    }

    fn loss_with(&self, params: &ParamStore, name: &str, value: Tensor) -> Result<f64> {
        let mut p = params.clone();
        *p.get_mut(name)? = value;
        Ok(self.eval(&p, false)?.0)
    }
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / (n.abs() + 1e-8)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdSettings {
    pub h: f64,
    /// Random directions per parameter tensor.
    pub directions: usize,
    pub seed: u64,
}

impl Default for FdSettings {
    fn default() -> Self {
        Self {
            h: 1e-5,
            directions: 3,
            seed: 0,
        }
    }
}

/// Checks the tape gradient of every parameter against central differences.
/// A single-branch connection runs with `factor_set` fixed.
pub fn check_detector_gradients(
    det: &ToyDetector,
    params: &ParamStore,
    scene: &Scene,
    loss_cfg: &LossConfig,
    factor_set: Option<&FactorSet>,
    fd: FdSettings,
) -> Result<GradientReport> {
    let FdSettings { h, directions, seed } = fd;
    let problem = Problem {
        det,
        scene,
        targets: targets_for(det, &scene.annotations),
        loss_cfg,
        factor_set,
    };
    let (loss, grads) = problem.eval(params, true)?;
    let grads = grads.expect("requested");
    let resolution_floor = LOSS_ULPS * f64::EPSILON * loss.abs().max(1.0) / (2.0 * h) / TOLERANCE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Vec::with_capacity(params.len());

    for (name, value) in params.iter() {
        let analytic = grads.get(name)?;
        let numeric = central_difference(value, h, |probe| problem.loss_with(params, name, probe.clone()))?;
        let (mut max_err, mut unresolved, mut unresolved_err, mut strict) = (0.0f64, 0, 0.0f64, 0);
        for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
            let e = rel(a, n);
            strict += usize::from(e > TOLERANCE);
            if n.abs().max(a.abs()) < resolution_floor {
                unresolved += 1;
                unresolved_err = unresolved_err.max((a - n).abs());
            } else {
                max_err = max_err.max(e);
            }
        }

        let mut dir_err = 0.0f64;
        for _ in 0..directions {
            let v: Vec<f64> = (0..value.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let shifted = |sign: f64| -> Result<f64> {
                let data = value.data().iter().zip(&v).map(|(x, d)| x + sign * h * d).collect();
                problem.loss_with(params, name, Tensor::new(value.shape(), data)?)
            };
            let n = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * h);
            let a: f64 = analytic.data().iter().zip(&v).map(|(g, d)| g * d).sum();
            dir_err = dir_err.max(rel(a, n));
        }

        report.push(ParamCheck {
            name: name.to_string(),
            scalars: value.len(),
            max_relative_error: max_err,
            unresolved,
            strict_failures: strict,
            unresolved_max_abs_error: unresolved_err,
            directional_relative_error: dir_err,
        });
    }
    Ok(GradientReport {
        loss,
        resolution_floor,
        params: report,
    })
}
