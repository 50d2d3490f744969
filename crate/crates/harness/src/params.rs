//! Named parameter tensors and their initialisers.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use renorm_core::{Graph, Tensor, Var};

use crate::error::{HarnessError, Result};

/// Parameters keyed by dotted name. Iteration order is the name order, which
/// keeps updates and checkpoints deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| HarnessError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| HarnessError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Puts every parameter on `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), g.param(v.clone())))
                .collect(),
        }
    }

    /// Same as [`ParamStore::bind`] but as constants, for inference.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), g.constant(v.clone())))
                .collect(),
        }
    }
}

/// Graph handles for a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| HarnessError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients after backward, zero for parameters the loss did not reach.
    pub fn gradients(&self, g: &Graph, store: &ParamStore) -> Result<ParamStore> {
        let mut out = ParamStore::new();
        for (name, var) in self.iter() {
            let grad = match g.grad(var) {
                Some(t) => t.clone(),
                None => Tensor::zeros(store.get(name)?.shape()),
            };
            out.insert(name, grad);
        }
        Ok(out)
    }
}

/// Deterministic initialiser stream.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let d = Normal::new(0.0, std).expect("std is finite and non-negative");
        let data = (0..shape.iter().product::<usize>())
            .map(|_| d.sample(&mut self.rng))
            .collect();
        Tensor::new(shape, data).expect("finite samples")
    }

    /// He-normal conv weight `O×C×k×k`.
    pub fn conv(&mut self, out_c: usize, in_c: usize, k: usize) -> Tensor {
        let fan_in = (in_c * k * k) as f64;
        self.normal(&[out_c, in_c, k, k], (2.0 / fan_in).sqrt())
    }

    /// `O×C×1×1` weight whose `O×C` matrix has orthonormal rows (or columns
    /// when `O > C`).
    pub fn orthogonal_1x1(&mut self, out_c: usize, in_c: usize) -> Tensor {
        let (rows, cols) = if out_c <= in_c { (out_c, in_c) } else { (in_c, out_c) };
        let raw = self.normal(&[rows, cols], 1.0);
        let mut m: Vec<Vec<f64>> = raw.data().chunks(cols).map(<[f64]>::to_vec).collect();
        for i in 0..rows {
            for j in 0..i {
                let dot: f64 = m[i].iter().zip(&m[j]).map(|(a, b)| a * b).sum();
                let prev = m[j].clone();
                for (a, b) in m[i].iter_mut().zip(prev) {
                    *a -= dot * b;
                }
            }
            let norm = m[i].iter().map(|a| a * a).sum::<f64>().sqrt();
            for a in &mut m[i] {
                *a /= norm;
            }
        }
        let data: Vec<f64> = if out_c <= in_c {
            m.concat()
        } else {
            (0..out_c)
                .flat_map(|o| (0..in_c).map(move |c| (o, c)))
                .map(|(o, c)| m[c][o])
                .collect()
        };
        Tensor::new(&[out_c, in_c, 1, 1], data).expect("finite")
    }
}

/// `C×C×1×1` identity kernel.
pub fn identity_1x1(c: usize) -> Tensor {
    Tensor::from_fn(&[c, c, 1, 1], |i| if i / c == i % c { 1.0 } else { 0.0 }).expect("finite")
}
