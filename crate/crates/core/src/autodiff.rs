//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order, so parents always
//! precede children. [`Graph::backward`] walks the tape once in reverse and
//! leaves accumulated gradients on every node that requires them. A tape can
//! be differentiated only once; build a new graph for the next pass.

use crate::error::TensorError;
use crate::kernels::{self, ConvGeometry, Tap};
use crate::tensor::{check_same_shape, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    LinearCombination(Vec<(Var, f64)>),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    Resize {
        x: Var,
        planes: usize,
        in_hw: (usize, usize),
        rows: Vec<Tap>,
        cols: Vec<Tap>,
    },
    ChannelMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Mul(Var, Var),
    Softmax(Var),
    Relu(Var),
    Sigmoid(Var),
    BatchNorm {
        x: Var,
        inv_std: Vec<f64>,
        plane: usize,
    },
    Sum(Var),
    FocalLoss {
        logits: Var,
        dlogits: Vec<f64>,
    },
    SmoothL1 {
        pred: Var,
        dpred: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf; receives a gradient on backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies `v` into a new constant leaf, cutting every gradient path through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient after [`Graph::backward`]; `None` for nodes that
    /// do not require gradients or were not reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Result<Var, TensorError> {
        if value.data().iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name(&op) });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.linear_combination(&[(a, 1.0), (b, 1.0)])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.linear_combination(&[(a, 1.0), (b, -1.0)])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var, TensorError> {
        self.linear_combination(&[(a, k)])
    }

    /// `Σ k_i · x_i` over same-shape tensors.
    pub fn linear_combination(&mut self, terms: &[(Var, f64)]) -> Result<Var, TensorError> {
        let Some(&(first, _)) = terms.first() else {
            return Err(TensorError::Geometry("empty linear combination".into()));
        };
        let first = self.value(first);
        let mut out = vec![0.0; first.len()];
        let shape = first.shape().to_vec();
        for &(v, k) in terms {
            let t = self.value(v);
            check_same_shape(self.value(terms[0].0), t)?;
            for (o, x) in out.iter_mut().zip(t.data()) {
                *o += k * x;
            }
        }
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(
            Tensor::from_parts(shape, out),
            Op::LinearCombination(terms.to_vec()),
            &parents,
        )
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (at, bt) = (self.value(a), self.value(b));
        check_same_shape(at, bt)?;
        let y: Vec<f64> = at.data().iter().zip(bt.data()).map(|(x, y)| x * y).collect();
        let shape = at.shape().to_vec();
        self.push(Tensor::from_parts(shape, y), Op::Mul(a, b), &[a, b])
    }

    /// Cross-correlation with optional bias. `w` is `O×C×kH×kW`, `b` is `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let xt = self.value(x);
        let wt = self.value(w);
        let geom = ConvGeometry::new(xt.nchw()?, wt.shape(), stride, pad)?;
        let bias = match b {
            Some(b) => {
                let bt = self.value(b);
                if bt.shape() != [geom.out_c] {
                    return Err(TensorError::ShapeMismatch {
                        left: bt.shape().to_vec(),
                        right: vec![geom.out_c],
                    });
                }
                Some(bt.data())
            }
            None => None,
        };
        let y = kernels::conv2d_forward(xt.data(), wt.data(), bias, &geom);
        let shape = out_shape(xt, geom.out_c, geom.out_h, geom.out_w);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(Tensor::from_parts(shape, y), Op::Conv2d { x, w, b, geom }, &parents)
    }

    /// Bilinear resize with the align-corners=false convention.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var, TensorError> {
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::Geometry("zero-size resize output".into()));
        }
        let xt = self.value(x);
        let [n, c, h, w] = xt.nchw()?;
        if h == 0 || w == 0 {
            return Err(TensorError::Geometry("zero-size resize input".into()));
        }
        let rows = kernels::bilinear_taps(h, out_h);
        let cols = kernels::bilinear_taps(w, out_w);
        let y = kernels::bilinear_forward(xt.data(), n * c, (h, w), &rows, &cols);
        let shape = out_shape(xt, c, out_h, out_w);
        self.push(
            Tensor::from_parts(shape, y),
            Op::Resize {
                x,
                planes: n * c,
                in_hw: (h, w),
                rows,
                cols,
            },
            &[x],
        )
    }

    /// Max across the channel axis: `C×H×W → 1×H×W`. Ties go to the lowest channel.
    pub fn channel_max(&mut self, x: Var) -> Result<Var, TensorError> {
        let xt = self.value(x);
        let [n, c, h, w] = xt.nchw()?;
        if c == 0 {
            return Err(TensorError::Geometry("channel_max needs C >= 1".into()));
        }
        let plane = h * w;
        let mut out = vec![0.0; n * plane];
        let mut argmax = vec![0; n * plane];
        let d = xt.data();
        for b in 0..n {
            for p in 0..plane {
                let mut best = d[b * c * plane + p];
                let mut arg = 0;
                for ch in 1..c {
                    let v = d[(b * c + ch) * plane + p];
                    if v > best {
                        best = v;
                        arg = ch;
                    }
                }
                out[b * plane + p] = best;
                argmax[b * plane + p] = arg;
            }
        }
        let shape = out_shape(xt, 1, h, w);
        self.push(Tensor::from_parts(shape, out), Op::ChannelMax { x, argmax }, &[x])
    }

    /// Softmax over all elements of `x`, treated as one vector.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let xt = self.value(x);
        let y = softmax_values(xt.data());
        let shape = xt.shape().to_vec();
        self.push(Tensor::from_parts(shape, y), Op::Softmax(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let y = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 })?;
        self.push(y, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        let y = self.value(x).map(kernels::sigmoid)?;
        self.push(y, Op::Sigmoid(x), &[x])
    }

    /// Inference-mode batch norm with fixed per-channel statistics.
    pub fn batch_norm_infer(&mut self, x: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var, TensorError> {
        let xt = self.value(x);
        let [n, c, h, w] = xt.nchw()?;
        if mean.len() != c || var.len() != c {
            return Err(TensorError::Geometry(format!(
                "batch norm statistics for {} channels, input has {c}",
                mean.len()
            )));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let plane = h * w;
        let mut y = xt.data().to_vec();
        for b in 0..n {
            for ch in 0..c {
                for v in &mut y[(b * c + ch) * plane..][..plane] {
                    *v = (*v - mean[ch]) * inv_std[ch];
                }
            }
        }
        let shape = xt.shape().to_vec();
        self.push(Tensor::from_parts(shape, y), Op::BatchNorm { x, inv_std, plane }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Sigmoid focal loss `Σ −α (1−p_t)^γ log p_t / normalizer` over every
    /// element; `targets` holds 0/1 labels.
    pub fn focal_loss(
        &mut self,
        logits: Var,
        targets: &Tensor,
        alpha: f64,
        gamma: f64,
        normalizer: f64,
    ) -> Result<Var, TensorError> {
        let lt = self.value(logits);
        check_same_shape(lt, targets)?;
        let mut total = 0.0;
        let mut dlogits = Vec::with_capacity(lt.len());
        for (&z, &t) in lt.data().iter().zip(targets.data()) {
            let s = if t > 0.5 { 1.0 } else { -1.0 };
            let log_pt = kernels::log_sigmoid(s * z);
            let pt = log_pt.exp();
            let q = 1.0 - pt;
            let mod_q = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
            total += -alpha * mod_q * log_pt;
            // d/dz of −α q^γ log p_t with dp_t/dz = s·p_t·q
            let d = s * alpha * (gamma * mod_q * pt * log_pt - mod_q * q);
            dlogits.push(d / normalizer);
        }
        self.push(
            Tensor::scalar(total / normalizer),
            Op::FocalLoss { logits, dlogits },
            &[logits],
        )
    }

    /// Smooth-L1 summed over elements where `mask` is true, divided by `normalizer`.
    pub fn smooth_l1(
        &mut self,
        pred: Var,
        target: &Tensor,
        mask: &[bool],
        beta: f64,
        normalizer: f64,
    ) -> Result<Var, TensorError> {
        let pt = self.value(pred);
        check_same_shape(pt, target)?;
        if mask.len() != pt.len() {
            return Err(TensorError::Geometry("smooth_l1 mask length".into()));
        }
        let mut total = 0.0;
        let mut dpred = vec![0.0; pt.len()];
        for (i, ((&p, &t), &m)) in pt.data().iter().zip(target.data()).zip(mask).enumerate() {
            if !m {
                continue;
            }
            let d = p - t;
            let (l, g) = if d.abs() < beta {
                (0.5 * d * d / beta, d / beta)
            } else {
                (d.abs() - 0.5 * beta, d.signum())
            };
            total += l;
            dpred[i] = g / normalizer;
        }
        self.push(
            Tensor::scalar(total / normalizer),
            Op::SmoothL1 { pred, dpred },
            &[pred],
        )
    }

    /// Reverse pass from a scalar `loss`. Gradients accumulate on every node
    /// that requires them and can be read with [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: lt.shape().to_vec(),
            });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            let shape = self.nodes[i].value.shape().to_vec();
            self.nodes[i].grad = Some(Tensor::from_parts(shape, g));
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::LinearCombination(terms) => {
                for &(v, k) in terms {
                    send(v, g.iter().map(|x| k * x).collect());
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let need_dx = self.nodes[x.0].requires_grad;
                let (dx, dw, db) =
                    kernels::conv2d_backward(self.value(*x).data(), self.value(*w).data(), g, geom, need_dx);
                if let Some(dx) = dx {
                    send(*x, dx);
                }
                send(*w, dw);
                if let Some(b) = b {
                    send(*b, db);
                }
            }
            Op::Resize {
                x,
                planes,
                in_hw,
                rows,
                cols,
            } => send(*x, kernels::bilinear_backward(g, *planes, *in_hw, rows, cols)),
            Op::ChannelMax { x, argmax } => {
                let [n, c, h, w] = self.value(*x).nchw().expect("validated on forward");
                let plane = h * w;
                let mut dx = vec![0.0; n * c * plane];
                for b in 0..n {
                    for p in 0..plane {
                        let ch = argmax[b * plane + p];
                        dx[(b * c + ch) * plane + p] = g[b * plane + p];
                    }
                }
                send(*x, dx);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                send(*a, g.iter().zip(bv).map(|(gi, y)| gi * y).collect());
                send(*b, g.iter().zip(av).map(|(gi, x)| gi * x).collect());
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                send(*x, y.iter().zip(g).map(|(yi, gi)| yi * (gi - dot)).collect());
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                send(
                    *x,
                    xv.iter()
                        .zip(g)
                        .map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 })
                        .collect(),
                );
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                send(*x, y.iter().zip(g).map(|(s, gi)| gi * s * (1.0 - s)).collect());
            }
            Op::BatchNorm { x, inv_std, plane } => {
                let c = inv_std.len();
                send(
                    *x,
                    g.iter()
                        .enumerate()
                        .map(|(j, gi)| gi * inv_std[(j / plane) % c])
                        .collect(),
                );
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).len()]),
            Op::FocalLoss { logits, dlogits } => send(*logits, dlogits.iter().map(|d| d * g[0]).collect()),
            Op::SmoothL1 { pred, dpred } => send(*pred, dpred.iter().map(|d| d * g[0]).collect()),
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::LinearCombination(_) => "linear_combination",
        Op::Conv2d { .. } => "conv2d",
        Op::Resize { .. } => "bilinear_resize",
        Op::ChannelMax { .. } => "channel_max",
        Op::Mul(..) => "mul",
        Op::Softmax(_) => "softmax",
        Op::Relu(_) => "relu",
        Op::Sigmoid(_) => "sigmoid",
        Op::BatchNorm { .. } => "batch_norm_infer",
        Op::Sum(_) => "sum",
        Op::FocalLoss { .. } => "focal_loss",
        Op::SmoothL1 { .. } => "smooth_l1",
    }
}

fn out_shape(input: &Tensor, c: usize, h: usize, w: usize) -> Vec<usize> {
    if input.rank() == 4 {
        vec![input.shape()[0], c, h, w]
    } else {
        vec![c, h, w]
    }
}

pub(crate) fn softmax_values(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Tape-free helpers for callers that only need values.
pub mod eval {
    use super::*;

    fn run(f: impl FnOnce(&mut Graph) -> Result<Var, TensorError>) -> Result<Tensor, TensorError> {
        let mut g = Graph::new();
        let out = f(&mut g)?;
        Ok(g.nodes.swap_remove(out.0).value)
    }

    pub fn conv2d(
        x: &Tensor,
        w: &Tensor,
        b: Option<&Tensor>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor, TensorError> {
        run(|g| {
            let x = g.constant(x.clone());
            let w = g.constant(w.clone());
            let b = b.map(|b| g.constant(b.clone()));
            g.conv2d(x, w, b, stride, pad)
        })
    }

    pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor, TensorError> {
        run(|g| {
            let x = g.constant(x.clone());
            g.bilinear_resize(x, out_h, out_w)
        })
    }

    pub fn channel_max(x: &Tensor) -> Result<Tensor, TensorError> {
        run(|g| {
            let x = g.constant(x.clone());
            g.channel_max(x)
        })
    }

    pub fn softmax(x: &Tensor) -> Result<Tensor, TensorError> {
        run(|g| {
            let x = g.constant(x.clone());
            g.softmax(x)
        })
    }

    pub fn relu(x: &Tensor) -> Result<Tensor, TensorError> {
        run(|g| {
            let x = g.constant(x.clone());
            g.relu(x)
        })
    }

    pub fn sigmoid(x: &Tensor) -> Result<Tensor, TensorError> {
        run(|g| {
            let x = g.constant(x.clone());
            g.sigmoid(x)
        })
    }

    pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        linear_combination(&[(a, 1.0), (b, 1.0)])
    }

    pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        linear_combination(&[(a, 1.0), (b, -1.0)])
    }

    pub fn scale(a: &Tensor, k: f64) -> Result<Tensor, TensorError> {
        linear_combination(&[(a, k)])
    }

    pub fn linear_combination(terms: &[(&Tensor, f64)]) -> Result<Tensor, TensorError> {
        run(|g| {
            let vars: Vec<(Var, f64)> = terms.iter().map(|(t, k)| (g.constant((*t).clone()), *k)).collect();
            g.linear_combination(&vars)
        })
    }
}
