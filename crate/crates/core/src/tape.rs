//! Reverse-mode differentiation over tensor-valued nodes.
//!
//! A [`Tape`] is an append-only list of nodes. Every operation evaluates
//! eagerly, stores its output plus whatever the backward pass needs, and
//! returns a [`Var`] handle. [`Tape::backward`] walks the list in reverse
//! and accumulates gradients for every leaf created with [`Tape::leaf`].
//!
//! A tape is single-writer. Batch parallelism uses one tape per sample.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::conv::{self, ConvGeom, ConvShape};
use crate::kernels::index::IndexMap;
use crate::kernels::mode;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pixel weights for the class-balanced cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BceWeights {
    /// Weight on negative pixels (`y == 0`).
    pub alpha: f64,
    /// Weight on positive pixels (`y >= eta`).
    pub beta: f64,
    pub eta: f64,
}

/// Predictions are clamped to `[PRED_EPS, 1 - PRED_EPS]` before the logs.
pub const PRED_EPS: f64 = 1e-6;

enum Op {
    Leaf,
    ModeProduct { x: Var, a: Var, mode: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ChannelBias { x: Var, bias: Var },
    Sum(Var),
    Relu(Var),
    Sigmoid(Var),
    Conv {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool { x: Var, argmax: Vec<u32> },
    Gather { x: Var, map: Arc<IndexMap> },
    Concat(Vec<Var>),
    Reshape(Var),
    GlobalAvgPool(Var),
    WeightedBce {
        pred: Var,
        label: Arc<Tensor>,
        weights: BceWeights,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::ModeProduct { x, a, .. } => vec![*x, *a],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::ChannelBias { x, bias } => vec![*x, *bias],
            Op::Scale(x, _)
            | Op::Sum(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Reshape(x)
            | Op::GlobalAvgPool(x) => vec![*x],
            Op::Conv { x, weight, bias, .. } => {
                let mut v = vec![*x, *weight];
                v.extend(bias);
                v
            }
            Op::MaxPool { x, .. } | Op::Gather { x, .. } => vec![*x],
            Op::Concat(parts) => parts.clone(),
            Op::WeightedBce { pred, .. } => vec![*pred],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    macs: u64,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` is a leaf (or the
    /// loss itself) that the loss depends on.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by mode products and convolutions so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Differentiable input (parameter or probe).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, op, needs_grad)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::DetachedNode(v.0))
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn mode_product(&mut self, x: Var, a: Var, mode: usize) -> Result<Var> {
        self.check(x)?;
        self.check(a)?;
        let y = mode::mode_n_product(self.value(x), self.value(a), mode)?;
        let (pre, n, post) = mode::split_at_mode(self.shape(x), mode);
        self.macs += (pre * n * post * self.shape(a)[0]) as u64;
        Ok(self.record(y, Op::ModeProduct { x, a, mode }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let y = self.value(a).add(self.value(b))?;
        Ok(self.record(y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let y = self.value(a).zip_map(self.value(b), |p, q| p - q)?;
        Ok(self.record(y, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        Ok(self.record(y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.check(x)?;
        let y = self.value(x).scale(s);
        Ok(self.record(y, Op::Scale(x, s)))
    }

    /// Adds `bias[c]` to every element whose last index is `c`.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let c = *self.shape(x).last().unwrap();
        if self.shape(bias) != [c] {
            return Err(Error::shape("channel_bias", &[c], self.shape(bias)));
        }
        let mut y = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for px in y.data_mut().chunks_exact_mut(c) {
            for (v, bv) in px.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        Ok(self.record(y, Op::ChannelBias { x, bias }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let y = Tensor::scalar(self.value(x).sum());
        Ok(self.record(y, Op::Sum(x)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let y = self.value(x).map(|v| v.max(0.0));
        Ok(self.record(y, Op::Relu(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let y = self.value(x).map(sigmoid);
        Ok(self.record(y, Op::Sigmoid(x)))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    ) -> Result<Var> {
        self.check(x)?;
        self.check(weight)?;
        if let Some(b) = bias {
            self.check(b)?;
        }
        let (y, shape): (Tensor, ConvShape) = conv::forward(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &geom,
        )?;
        self.macs += shape.macs(geom.transposed);
        Ok(self.record(
            y,
            Op::Conv {
                x,
                weight,
                bias,
                geom,
            },
        ))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (y, argmax) = conv::maxpool2(self.value(x))?;
        Ok(self.record(y, Op::MaxPool { x, argmax }))
    }

    pub fn gather(&mut self, x: Var, map: Arc<IndexMap>) -> Result<Var> {
        self.check(x)?;
        let y = map.apply(self.value(x))?;
        Ok(self.record(y, Op::Gather { x, map }))
    }

    /// Concatenates `H×W×C_i` maps along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Geometry("concat of nothing".into()))?;
        for &p in parts {
            self.check(p)?;
        }
        let (h, w, _) = self.value(first).hwc()?;
        let mut chans = Vec::with_capacity(parts.len());
        for &p in parts {
            let (ph, pw, pc) = self.value(p).hwc()?;
            if (ph, pw) != (h, w) {
                return Err(Error::shape("concat_channels", &[h, w], &[ph, pw]));
            }
            chans.push(pc);
        }
        let total: usize = chans.iter().sum();
        let mut out = Vec::with_capacity(h * w * total);
        for px in 0..h * w {
            for (&p, &c) in parts.iter().zip(&chans) {
                out.extend_from_slice(&self.value(p).data()[px * c..(px + 1) * c]);
            }
        }
        let y = Tensor::new(&[h, w, total], out)?;
        Ok(self.record(y, Op::Concat(parts.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.record(y, Op::Reshape(x)))
    }

    /// `H×W×C` → `[C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (h, w, c) = self.value(x).hwc()?;
        let mut m = vec![0.0; c];
        for px in self.value(x).data().chunks_exact(c) {
            for (a, v) in m.iter_mut().zip(px) {
                *a += v;
            }
        }
        let n = (h * w) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        Ok(self.record(Tensor::new(&[c], m)?, Op::GlobalAvgPool(x)))
    }

    /// Class-balanced binary cross-entropy, summed over pixels:
    /// `-α Σ_{y=0} log(1-ŷ) - β Σ_{y≥η} log ŷ`; pixels with `0 < y < η`
    /// contribute nothing.
    pub fn weighted_bce(&mut self, pred: Var, label: Arc<Tensor>, weights: BceWeights) -> Result<Var> {
        self.check(pred)?;
        if self.shape(pred) != label.shape() {
            return Err(Error::shape("weighted_bce", label.shape(), self.shape(pred)));
        }
        let mut loss = 0.0;
        for (&p, &y) in self.value(pred).data().iter().zip(label.data()) {
            let p = p.clamp(PRED_EPS, 1.0 - PRED_EPS);
            if y == 0.0 {
                loss -= weights.alpha * (1.0 - p).ln();
            } else if y >= weights.eta {
                loss -= weights.beta * p.ln();
            }
        }
        Ok(self.record(
            Tensor::scalar(loss),
            Op::WeightedBce {
                pred,
                label,
                weights,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        let mut loss_grad = None;
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if i == loss.0 {
                loss_grad = Some(g.clone());
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, g, &mut grads);
        }
        if let Some(g) = loss_grad {
            grads[loss.0] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::ModeProduct { x, a, mode } => {
                let (xv, av) = (self.value(*x), self.value(*a));
                if self.wants(*a) {
                    let da = mode::factor_grad(xv, &g, av.shape()[0], *mode);
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*x) {
                    let dx = mode::input_grad(&g, av, xv.shape(), *mode);
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *b, g.scale(-1.0));
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let da = g.zip_map(self.value(*b), |p, q| p * q).unwrap();
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let db = g.zip_map(self.value(*a), |p, q| p * q).unwrap();
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.scale(*s)),
            Op::ChannelBias { x, bias } => {
                if self.wants(*bias) {
                    let c = self.value(*bias).len();
                    let mut db = vec![0.0; c];
                    for px in g.data().chunks_exact(c) {
                        for (d, v) in db.iter_mut().zip(px) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(&[c], db).unwrap());
                }
                self.accumulate(grads, *x, g);
            }
            Op::Sum(x) => {
                let dx = Tensor::full(self.shape(*x), g.data()[0]);
                self.accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let dx = g.zip_map(out, |gv, y| if y > 0.0 { gv } else { 0.0 }).unwrap();
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = g.zip_map(out, |gv, y| gv * y * (1.0 - y)).unwrap();
                self.accumulate(grads, *x, dx);
            }
            Op::Conv {
                x,
                weight,
                bias,
                geom,
            } => {
                let (dx, dw, db) =
                    conv::backward(self.value(*x), self.value(*weight), &g, geom, self.wants(*x));
                if let Some(b) = bias {
                    self.accumulate(grads, *b, db);
                }
                self.accumulate(grads, *weight, dw);
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let d = dx.data_mut();
                for (&i, &gv) in argmax.iter().zip(g.data()) {
                    d[i as usize] += gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Gather { x, map } => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, map.scatter_add(&g));
                }
            }
            Op::Concat(parts) => {
                let chans: Vec<usize> = parts.iter().map(|p| self.shape(*p)[2]).collect();
                let total: usize = chans.iter().sum();
                let mut offset = 0;
                for (&p, &c) in parts.iter().zip(&chans) {
                    if self.wants(p) {
                        let shape = self.shape(p).to_vec();
                        let mut part = Vec::with_capacity(shape.iter().product());
                        for px in g.data().chunks_exact(total) {
                            part.extend_from_slice(&px[offset..offset + c]);
                        }
                        self.accumulate(grads, p, Tensor::new(&shape, part).unwrap());
                    }
                    offset += c;
                }
            }
            Op::Reshape(x) => {
                let dx = g.reshape(self.shape(*x)).unwrap();
                self.accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let (h, w, c) = self.value(*x).hwc().unwrap();
                let n = (h * w) as f64;
                let mut dx = Vec::with_capacity(h * w * c);
                for _ in 0..h * w {
                    dx.extend(g.data().iter().map(|v| v / n));
                }
                self.accumulate(grads, *x, Tensor::new(&[h, w, c], dx).unwrap());
            }
            Op::WeightedBce {
                pred,
                label,
                weights,
            } => {
                let gv = g.data()[0];
                let mut dx = Tensor::zeros(label.shape());
                let pd = self.value(*pred).data();
                for ((d, &p), &y) in dx.data_mut().iter_mut().zip(pd).zip(label.data()) {
                    if !(PRED_EPS..=1.0 - PRED_EPS).contains(&p) {
                        continue;
                    }
                    if y == 0.0 {
                        *d = gv * weights.alpha / (1.0 - p);
                    } else if y >= weights.eta {
                        *d = -gv * weights.beta / p;
                    }
                }
                self.accumulate(grads, *pred, dx);
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i[1] as f64));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::ones(&[2, 3]));
        assert_eq!(g.get(s).unwrap().data(), &[1.0]);
    }

    #[test]
    fn rejects_non_scalar_loss_and_foreign_nodes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
        let mut other = Tape::new();
        other.leaf(Tensor::ones(&[1]));
        let foreign = other.leaf(Tensor::ones(&[1]));
        let mut small = Tape::new();
        small.leaf(Tensor::ones(&[1]));
        assert!(matches!(small.backward(foreign), Err(Error::DetachedNode(1))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2], 3.0));
        let c = tape.constant(Tensor::full(&[2], 2.0));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1], 1.5));
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let g = tape.backward(z).unwrap();
        assert!((g.get(x).unwrap().data()[0] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_midpoint() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
