//! Feature bases over a multi-scale cascade and the linear map between
//! per-level factors λ and per-basis connection strengths c.
//!
//! For a cascade `F1..Fk` (finest first, all on one grid) the bases are
//!
//! ```text
//! B1 = F1,   Bi = Fi − (F1 + … + F(i−1))
//! ```
//!
//! so a raw weighting `Σ λi·Fi` equals `Σ ci·Bi` for exactly one `c`. With
//! three levels and uniform factors that `c` is `(4, 2, 1)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::AlgebraError;
use crate::linalg;
use crate::tensor::Tensor;

/// Ordered multi-scale feature levels, finest first.
#[derive(Debug, Clone)]
pub struct FeatureCascade {
    levels: Vec<Tensor>,
    strides: Vec<usize>,
}

impl FeatureCascade {
    /// Adjacent strides must differ by a factor of two.
    pub fn new(levels: Vec<Tensor>, strides: Vec<usize>) -> Result<Self, AlgebraError> {
        if levels.is_empty() {
            return Err(AlgebraError::EmptyCascade);
        }
        if levels.len() != strides.len() {
            return Err(AlgebraError::Arity {
                expected: levels.len(),
                got: strides.len(),
            });
        }
        if strides[0] == 0 || strides.windows(2).any(|w| w[1] != 2 * w[0]) {
            return Err(AlgebraError::Strides(strides));
        }
        for l in &levels {
            l.nchw()?;
        }
        Ok(Self { levels, strides })
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn degrees_of_freedom(&self) -> usize {
        self.levels.len()
    }
}

/// Per-level amplification (≥ 1) or deamplification (< 1) factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Factors(pub Vec<f64>);

/// Per-basis connection strengths; `(n, 2, 1)` names an n21 connection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Strengths(pub Vec<f64>);

impl Factors {
    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0; k])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Strengths {
    /// `(n, 2, 1)`.
    pub fn n21(n: f64) -> Self {
        Self(vec![n, 2.0, 1.0])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Coefficients of the bases in terms of the levels: `B = N·F`.
fn basis_in_levels(k: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|i| {
            (0..k)
                .map(|j| {
                    if j == i {
                        1.0
                    } else if j < i {
                        -1.0
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Solves `Σ λi·Fi = Σ cj·Bj` for `c` by matching the coefficient of every
/// level, i.e. `Nᵀ·c = λ`, with Gaussian elimination.
pub fn strengths_from_factors(factors: &Factors) -> Result<Strengths, AlgebraError> {
    let k = factors.len();
    if k == 0 {
        return Err(AlgebraError::EmptyCascade);
    }
    let n = basis_in_levels(k);
    let nt: Vec<Vec<f64>> = (0..k).map(|i| (0..k).map(|j| n[j][i]).collect()).collect();
    Ok(Strengths(linalg::solve(&nt, factors.values())?))
}

/// Inverse of [`strengths_from_factors`]: `λ = Nᵀ·c`, so
/// `λk = ck` and `λi = ci − Σ_{j>i} cj`.
pub fn factors_from_strengths(strengths: &Strengths) -> Factors {
    let c = strengths.values();
    Factors((0..c.len()).map(|i| c[i] - c[i + 1..].iter().sum::<f64>()).collect())
}

/// Multiplicities of each basis inside each level: `F = M·B`.
pub fn reconstruction_matrix(k: usize) -> Vec<Vec<f64>> {
    let mut m: Vec<Vec<f64>> = Vec::with_capacity(k);
    for i in 0..k {
        let mut row = vec![0.0; k];
        row[i] = 1.0;
        for prev in &m {
            for (r, p) in row.iter_mut().zip(prev) {
                *r += p;
            }
        }
        m.push(row);
    }
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet {
    bases: Vec<Tensor>,
}

impl BasisSet {
    pub fn bases(&self) -> &[Tensor] {
        &self.bases
    }

    /// Rebuilds the aligned levels from the bases.
    pub fn reconstruct(&self) -> Result<Vec<Tensor>, AlgebraError> {
        let m = reconstruction_matrix(self.bases.len());
        m.iter()
            .map(|row| {
                let terms: Vec<(&Tensor, f64)> = self.bases.iter().zip(row.iter().copied()).collect();
                Ok(crate::autodiff::eval::linear_combination(&terms)?)
            })
            .collect()
    }
}

/// Resizes every level to the spatial grid of `target`. Levels already on
/// that grid are returned as-is. When `projections` is given, level `i` is
/// first passed through the 1×1 conv `projections[i]`; otherwise all levels
/// must share a channel count.
pub fn align_levels(
    g: &mut Graph,
    levels: &[Var],
    target: usize,
    projections: Option<&[Var]>,
) -> Result<Vec<Var>, AlgebraError> {
    if levels.is_empty() {
        return Err(AlgebraError::EmptyCascade);
    }
    if target >= levels.len() {
        return Err(AlgebraError::TargetLevel {
            target,
            levels: levels.len(),
        });
    }
    let projected: Vec<Var> = match projections {
        Some(p) => {
            if p.len() != levels.len() {
                return Err(AlgebraError::Arity {
                    expected: levels.len(),
                    got: p.len(),
                });
            }
            levels
                .iter()
                .zip(p)
                .map(|(&l, &w)| g.conv2d(l, w, None, 1, 0))
                .collect::<Result<_, _>>()?
        }
        None => {
            let channels: Vec<usize> = levels
                .iter()
                .map(|&l| g.value(l).nchw().map(|s| s[1]))
                .collect::<Result<_, _>>()?;
            if channels.windows(2).any(|w| w[0] != w[1]) {
                return Err(AlgebraError::Channels(channels));
            }
            levels.to_vec()
        }
    };
    let (h, w) = g.value(projected[target]).spatial()?;
    projected
        .into_iter()
        .map(|l| {
            if g.value(l).spatial()? == (h, w) {
                Ok(l)
            } else {
                Ok(g.bilinear_resize(l, h, w)?)
            }
        })
        .collect()
}

/// `B1 = F1`, `Bi = Fi − Σ_{j<i} Fj` on graph nodes.
pub fn basis_vars(g: &mut Graph, aligned: &[Var]) -> Result<Vec<Var>, AlgebraError> {
    if aligned.is_empty() {
        return Err(AlgebraError::EmptyCascade);
    }
    aligned
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            if i == 0 {
                return Ok(f);
            }
            let mut terms = vec![(f, 1.0)];
            terms.extend(aligned[..i].iter().map(|&p| (p, -1.0)));
            Ok(g.linear_combination(&terms)?)
        })
        .collect()
}

/// `Σ ci·Bi` on graph nodes.
pub fn combine_vars(g: &mut Graph, bases: &[Var], strengths: &Strengths) -> Result<Var, AlgebraError> {
    if bases.len() != strengths.len() {
        return Err(AlgebraError::Arity {
            expected: bases.len(),
            got: strengths.len(),
        });
    }
    let terms: Vec<(Var, f64)> = bases.iter().copied().zip(strengths.values().iter().copied()).collect();
    Ok(g.linear_combination(&terms)?)
}

/// Brings every level of `cascade` onto the grid of `target_level`.
pub fn align_cascade(cascade: &FeatureCascade, target_level: usize) -> Result<Vec<Tensor>, AlgebraError> {
    let mut g = Graph::new();
    let vars: Vec<Var> = cascade.levels().iter().map(|l| g.constant(l.clone())).collect();
    let out = align_levels(&mut g, &vars, target_level, None)?;
    Ok(out.into_iter().map(|v| g.value(v).clone()).collect())
}

pub fn bases_from_cascade(aligned: &[Tensor]) -> Result<BasisSet, AlgebraError> {
    let mut g = Graph::new();
    let vars: Vec<Var> = aligned.iter().map(|l| g.constant(l.clone())).collect();
    let out = basis_vars(&mut g, &vars)?;
    Ok(BasisSet {
        bases: out.into_iter().map(|v| g.value(v).clone()).collect(),
    })
}

pub fn combine(bases: &BasisSet, strengths: &Strengths) -> Result<Tensor, AlgebraError> {
    let mut g = Graph::new();
    let vars: Vec<Var> = bases.bases().iter().map(|b| g.constant(b.clone())).collect();
    let out = combine_vars(&mut g, &vars, strengths)?;
    Ok(g.value(out).clone())
}
