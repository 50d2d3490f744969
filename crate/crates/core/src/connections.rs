//! Renormalized connections for multi-branch (pyramid) detectors.
//!
//! * economical: only the finest branch gets `combine(bases(P3, P4, P5), (n, 2, 1))`;
//!   every other level passes through untouched.
//! * complete: every branch gets a weighted sum of all resampled levels,
//!   weights taken from a 4×4 strength matrix (rows = destination branch,
//!   columns = source level, both finest first).
//! * variants: a two-level basis over (P3, P4) or (P3, P5).

use serde::{Deserialize, Serialize};

use crate::algebra::{align_levels, basis_vars, combine_vars, Strengths};
use crate::autodiff::{Graph, Var};
use crate::error::{AlgebraError, ConnectionError};

/// Strength matrix inspired by adaptive feature pooling.
pub const ADAPTIVE_POOLING_MATRIX: [[f64; 4]; 4] = [
    [1.0, 0.15, 0.1, 0.1],
    [1.0, 0.3, 0.3, 0.25],
    [1.0, 0.25, 0.25, 0.25],
    [0.0, 0.3, 0.35, 0.4],
];

pub const IDENTITY_MATRIX: [[f64; 4]; 4] = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectionForm {
    /// Plain pyramid, no connection.
    None,
    SingleBranch,
    Economical,
    Complete,
    VariantSm,
    VariantSl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttachPoint {
    TopdownOut,
    BottomupOut,
}

/// How the two-level variants pick their strengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantStrengths {
    /// `(n, 2)`: the first two coefficients of n21.
    Named,
    /// `(2, 1)`: uniform factors solved for two degrees of freedom.
    Uniform,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Addons {
    pub projection_1x1: bool,
    pub norm: bool,
    pub activation: bool,
}

impl Addons {
    pub fn any(&self) -> bool {
        self.projection_1x1 || self.norm || self.activation
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectionSpec {
    pub form: ConnectionForm,
    /// First strength of the economical form (and the variants under `Named`).
    pub n: f64,
    /// Row-major 4×4 strengths; required by, and only allowed for, the complete form.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<f64>>,
    pub addons: Addons,
    pub attach_point: AttachPoint,
    pub variant_strengths: VariantStrengths,
}

impl ConnectionSpec {
    pub fn baseline() -> Self {
        Self {
            form: ConnectionForm::None,
            n: 4.0,
            matrix: None,
            addons: Addons::default(),
            attach_point: AttachPoint::TopdownOut,
            variant_strengths: VariantStrengths::Named,
        }
    }

    pub fn economical(n: f64) -> Self {
        Self {
            form: ConnectionForm::Economical,
            n,
            ..Self::baseline()
        }
    }

    pub fn complete(matrix: [[f64; 4]; 4]) -> Self {
        Self {
            form: ConnectionForm::Complete,
            matrix: Some(matrix.iter().flatten().copied().collect()),
            ..Self::baseline()
        }
    }

    pub fn validate(&self) -> Result<(), ConnectionError> {
        let complete = self.form == ConnectionForm::Complete;
        match (&self.matrix, complete) {
            (None, true) => return Err(ConnectionError::Spec("complete form needs a matrix".into())),
            (Some(_), false) => {
                return Err(ConnectionError::Spec(
                    "matrix is only valid for the complete form".into(),
                ))
            }
            (Some(m), true) if m.len() != 16 => {
                return Err(ConnectionError::Spec(format!(
                    "matrix needs 16 entries, got {}",
                    m.len()
                )))
            }
            (Some(m), true) if m.iter().any(|v| !v.is_finite()) => {
                return Err(ConnectionError::Spec("matrix entries must be finite".into()))
            }
            _ => {}
        }
        if !self.n.is_finite() {
            return Err(ConnectionError::Spec("n must be finite".into()));
        }
        if self.form == ConnectionForm::Economical && self.n <= 0.0 {
            return Err(ConnectionError::Spec(
                "n must be positive for the economical form".into(),
            ));
        }
        Ok(())
    }

    pub fn matrix4(&self) -> Option<[[f64; 4]; 4]> {
        self.matrix.as_ref().map(|m| {
            let mut out = [[0.0; 4]; 4];
            for (i, v) in m.iter().enumerate() {
                out[i / 4][i % 4] = *v;
            }
            out
        })
    }

    pub fn variant_pair_strengths(&self) -> Strengths {
        match self.variant_strengths {
            VariantStrengths::Named => Strengths(vec![self.n, 2.0]),
            VariantStrengths::Uniform => Strengths(vec![2.0, 1.0]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariantPair {
    /// P3 with P4.
    SmallMedium,
    /// P3 with P5.
    SmallLarge,
}

fn shared_channels(g: &Graph, levels: &[Var]) -> Result<(), ConnectionError> {
    let ch: Vec<usize> = levels
        .iter()
        .map(|&l| g.value(l).nchw().map(|s| s[1]))
        .collect::<Result<_, _>>()?;
    if ch.windows(2).any(|w| w[0] != w[1]) {
        return Err(ConnectionError::Channels(ch));
    }
    Ok(())
}

fn basis_connection(g: &mut Graph, levels: &[Var], strengths: &Strengths) -> Result<Var, ConnectionError> {
    shared_channels(g, levels)?;
    let aligned = align_levels(g, levels, 0, None)?;
    let bases = basis_vars(g, &aligned)?;
    Ok(combine_vars(g, &bases, strengths)?)
}

/// Renormalized input for the finest branch from `[P3, P4, P5]`.
/// Coarser levels are not touched; callers keep using their own handles.
pub fn economical(g: &mut Graph, pyramid: &[Var], strengths: &Strengths) -> Result<Var, ConnectionError> {
    if pyramid.len() != 3 {
        return Err(ConnectionError::Levels {
            expected: 3,
            got: pyramid.len(),
        });
    }
    if strengths.len() != 3 {
        return Err(AlgebraError::Arity {
            expected: 3,
            got: strengths.len(),
        }
        .into());
    }
    basis_connection(g, pyramid, strengths)
}

/// Two-level variant over P3 and one coarser level.
pub fn variant(
    g: &mut Graph,
    pyramid: &[Var],
    pair: VariantPair,
    strengths: &Strengths,
) -> Result<Var, ConnectionError> {
    if pyramid.len() != 3 {
        return Err(ConnectionError::Levels {
            expected: 3,
            got: pyramid.len(),
        });
    }
    if strengths.len() != 2 {
        return Err(AlgebraError::Arity {
            expected: 2,
            got: strengths.len(),
        }
        .into());
    }
    let other = match pair {
        VariantPair::SmallMedium => pyramid[1],
        VariantPair::SmallLarge => pyramid[2],
    };
    basis_connection(g, &[pyramid[0], other], strengths)
}

/// Branch inputs `b_j = Σ_i C[j][i]·resample(P_i → grid of P_j)`.
pub fn complete(g: &mut Graph, pyramid: &[Var], matrix: &[[f64; 4]; 4]) -> Result<Vec<Var>, ConnectionError> {
    if pyramid.len() != 4 {
        return Err(ConnectionError::Levels {
            expected: 4,
            got: pyramid.len(),
        });
    }
    shared_channels(g, pyramid)?;
    (0..4)
        .map(|j| {
            let aligned = align_levels(g, pyramid, j, None)?;
            let terms: Vec<(Var, f64)> = aligned.into_iter().zip(matrix[j]).collect();
            Ok(g.linear_combination(&terms)?)
        })
        .collect()
}

/// Optional 1×1 projection → fixed-statistics normalization → ReLU.
/// `projection` must be provided when the projection add-on is enabled.
pub fn apply_addons(g: &mut Graph, x: Var, addons: &Addons, projection: Option<Var>) -> Result<Var, ConnectionError> {
    let mut out = x;
    if addons.projection_1x1 {
        let w = projection.ok_or_else(|| ConnectionError::Spec("projection add-on needs a weight".into()))?;
        out = g.conv2d(out, w, None, 1, 0)?;
    }
    if addons.norm {
        let c = g.value(out).nchw()?[1];
        out = g.batch_norm_infer(out, &vec![0.0; c], &vec![1.0; c], NORM_EPS)?;
    }
    if addons.activation {
        out = g.relu(out)?;
    }
    Ok(out)
}

pub const NORM_EPS: f64 = 1e-5;
