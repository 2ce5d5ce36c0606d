//! Reverse-mode gradients over the layer primitives, in double precision.
//!
//! A [`Tape`] records every operation together with its output value. One
//! call to [`Tape::backward`] replays the record in reverse and returns the
//! gradient for every leaf; a second replay is rejected.

use super::conv::{conv2d_backward, depthwise_backward, transposed_backward};
use super::ops::bilinear_resize_backward;
use super::{
    activation, bilinear_resize, concat, conv2d, depthwise_conv2d, slice_channels,
    transposed_conv2d_padded, Activation, Padding, Tensor,
};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ConvKind {
    Standard,
    Depthwise,
    Transposed,
}

/// Blended distance to two targets over per-plane groups, see [`Tape::blended_norm`].
#[derive(Clone, Debug)]
pub struct BlendedNorm {
    pub ground_truth: Tensor<f64>,
    pub teacher: Tensor<f64>,
    pub mask: Option<Tensor<f64>>,
    pub alpha: f64,
    pub scale: f64,
    pub squared: bool,
}

/// Added to the squared norm in the gradient denominator only, so the loss
/// value itself stays exactly zero at zero residual.
pub const NORM_EPSILON: f64 = 1e-12;

impl BlendedNorm {
    fn check(&self, pred: &Tensor<f64>) -> Result<()> {
        for t in [Some(&self.ground_truth), Some(&self.teacher), self.mask.as_ref()]
            .into_iter()
            .flatten()
        {
            if t.shape() != pred.shape() {
                return Err(Error::shape("blended_norm", pred.shape(), t.shape()));
            }
        }
        Ok(())
    }

    /// Loss value and, optionally, its gradient with respect to `pred`.
    pub fn evaluate(&self, pred: &Tensor<f64>, with_grad: bool) -> Result<(f64, Option<Tensor<f64>>)> {
        self.check(pred)?;
        let [_, _, h, w] = pred.dims4();
        let plane = h * w;
        let mut total = 0.0;
        let mut grad = with_grad.then(|| vec![0.0; pred.len()]);
        let p = pred.data();
        let m = self.mask.as_ref().map(|m| m.data());
        for (weight, target) in [(self.alpha, &self.ground_truth), (1.0 - self.alpha, &self.teacher)] {
            if weight == 0.0 {
                continue;
            }
            let t = target.data();
            for g in 0..p.len() / plane {
                let range = g * plane..(g + 1) * plane;
                let masked = |i: usize| {
                    let r = p[i] - t[i];
                    m.map_or(r, |m| m[i] * r)
                };
                let sq: f64 = range.clone().map(|i| masked(i).powi(2)).sum();
                let (value, coef) = if self.squared {
                    (sq, 2.0)
                } else if sq == 0.0 {
                    (0.0, 0.0)
                } else {
                    (sq.sqrt(), 1.0 / (sq + NORM_EPSILON).sqrt())
                };
                total += weight * value;
                if let Some(grad) = grad.as_mut() {
                    for i in range {
                        let mi = m.map_or(1.0, |m| m[i]);
                        grad[i] += self.scale * weight * coef * mi * masked(i);
                    }
                }
            }
        }
        let grad = grad.map(|g| Tensor::new(pred.shape(), g)).transpose()?;
        Ok((self.scale * total, grad))
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv {
        kind: ConvKind,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: Padding,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Add {
        a: Var,
        b: Var,
    },
    Bilinear {
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Abs {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Scale {
        x: Var,
        k: f64,
    },
    Blended {
        x: Var,
        loss: Box<BlendedNorm>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor<f64>,
}

/// Gradients keyed by [`Var`], one entry per recorded node that received one.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    replayed: bool,
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

    fn push(&mut self, op: Op, value: Tensor<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<f64> {
        &self.nodes[v.0].value
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor<f64>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let y = conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, padding)?;
        Ok(self.push(Op::Conv { kind: ConvKind::Standard, x, w, b, stride, padding }, y))
    }

    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let y = depthwise_conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, padding)?;
        Ok(self.push(Op::Conv { kind: ConvKind::Depthwise, x, w, b, stride, padding }, y))
    }

    pub fn transposed_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let y = transposed_conv2d_padded(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, padding)?;
        Ok(self.push(Op::Conv { kind: ConvKind::Transposed, x, w, b, stride, padding }, y))
    }

    /// Batchnorm with frozen statistics; `gamma` and `beta` are trainable.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], epsilon: f64) -> Result<Var> {
        let xv = self.value(x);
        let [_, c, h, w] = super::expect_rank4("batchnorm", xv)?;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        if [g.len(), b.len(), mean.len(), var.len()].iter().any(|&l| l != c) {
            return Err(Error::invalid("batchnorm", format!("parameters do not match {c} channels")));
        }
        if var.iter().any(|v| v + epsilon <= 0.0) {
            return Err(Error::invalid("batchnorm", "variance + epsilon must be positive"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
        let mut out = xv.data().to_vec();
        for (i, plane) in out.chunks_mut(h * w).enumerate() {
            let ch = i % c;
            let s = g[ch] * inv_std[ch];
            plane.iter_mut().for_each(|v| *v = (*v - mean[ch]) * s + b[ch]);
        }
        let y = Tensor::new(xv.shape(), out)?;
        Ok(self.push(Op::BatchNorm { x, gamma, beta, mean: mean.to_vec(), inv_std }, y))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        if kind == Activation::Linear {
            return x;
        }
        let y = activation(self.value(x), kind);
        self.push(Op::Act { x, kind }, y)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = super::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add { a, b }, y))
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = bilinear_resize(self.value(x), out_h, out_w)?;
        Ok(self.push(Op::Bilinear { x }, y))
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<f64>> = xs.iter().map(|&v| self.value(v)).collect();
        let y = concat(&vals)?;
        Ok(self.push(Op::Concat { xs: xs.to_vec() }, y))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = slice_channels(self.value(x), start, len)?;
        Ok(self.push(Op::Slice { x, start }, y))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f64::abs);
        self.push(Op::Abs { x }, y)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum { x }, y)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let y = self.value(x).scale(k);
        self.push(Op::Scale { x, k }, y)
    }

    /// Scalar `scale · Σ_planes [α‖m⊙(x − gt)‖ + (1 − α)‖m⊙(x − teacher)‖]`,
    /// one norm per `h × w` plane.
    pub fn blended_norm(&mut self, x: Var, loss: BlendedNorm) -> Result<Var> {
        let (value, _) = loss.evaluate(self.value(x), false)?;
        Ok(self.push(Op::Blended { x, loss: Box::new(loss) }, Tensor::scalar(value)))
    }

    /// Replays the tape from `output`, seeded with `loss_gradient`.
    pub fn backward(&mut self, output: Var, loss_gradient: &Tensor<f64>) -> Result<Gradients> {
        if self.replayed {
            return Err(Error::TapeConsumed);
        }
        self.replayed = true;
        if loss_gradient.shape() != self.value(output).shape() {
            return Err(Error::shape("backward", self.value(output).shape(), loss_gradient.shape()));
        }
        let mut grads: Vec<Option<Tensor<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(loss_gradient.clone());

        for idx in (0..=output.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(gy);
                continue;
            }
            let mut send = |v: Var, g: Tensor<f64>| accumulate(&mut grads, v, g);
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv { kind, x, w, b, stride, padding } => {
                    let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                    let (dx, dw, db) = match kind {
                        ConvKind::Standard => conv2d_backward(xv, wv, &gy, *stride, *padding)?,
                        ConvKind::Depthwise => depthwise_backward(xv, wv, &gy, *stride, *padding)?,
                        ConvKind::Transposed => transposed_backward(xv, wv, &gy, *stride, *padding)?,
                    };
                    send(*x, dx);
                    send(*w, dw);
                    if let Some(b) = b {
                        let n = db.len();
                        send(*b, Tensor::new(&[n], db)?);
                    }
                }
                Op::BatchNorm { x, gamma, beta, mean, inv_std } => {
                    let xv = &self.nodes[x.0].value;
                    let g = self.nodes[gamma.0].value.data();
                    let [_, c, h, w] = xv.dims4();
                    let mut dx = gy.data().to_vec();
                    let mut dg = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for (i, (plane, xs)) in dx.chunks_mut(h * w).zip(xv.data().chunks(h * w)).enumerate() {
                        let ch = i % c;
                        for (d, &xi) in plane.iter_mut().zip(xs) {
                            dbeta[ch] += *d;
                            dg[ch] += *d * (xi - mean[ch]) * inv_std[ch];
                            *d *= g[ch] * inv_std[ch];
                        }
                    }
                    send(*x, Tensor::new(xv.shape(), dx)?);
                    send(*gamma, Tensor::new(&[c], dg)?);
                    send(*beta, Tensor::new(&[c], dbeta)?);
                }
                Op::Act { x, kind } => {
                    let xv = &self.nodes[x.0].value;
                    let dx = gy.zip_map(xv, |g, v| g * kind.slope(v))?;
                    send(*x, dx);
                }
                Op::Add { a, b } => {
                    send(*a, gy.clone());
                    send(*b, gy);
                }
                Op::Bilinear { x } => {
                    let [_, _, h, w] = self.nodes[x.0].value.dims4();
                    send(*x, bilinear_resize_backward(&gy, h, w));
                }
                Op::Concat { xs } => {
                    let mut start = 0;
                    for &v in xs {
                        let c = self.nodes[v.0].value.dims4()[1];
                        send(v, slice_channels(&gy, start, c)?);
                        start += c;
                    }
                }
                Op::Slice { x, start } => {
                    let xv = &self.nodes[x.0].value;
                    let [n, c, h, w] = xv.dims4();
                    let len = gy.dims4()[1];
                    let mut dx = vec![0.0; xv.len()];
                    for b in 0..n {
                        let dst = (b * c + start) * h * w;
                        dx[dst..dst + len * h * w].copy_from_slice(&gy.data()[b * len * h * w..(b + 1) * len * h * w]);
                    }
                    send(*x, Tensor::new(xv.shape(), dx)?);
                }
                Op::Abs { x } => {
                    let xv = &self.nodes[x.0].value;
                    send(*x, gy.zip_map(xv, |g, v| g * v.signum() * f64::from(v != 0.0))?);
                }
                Op::Sum { x } => {
                    let g = gy.data()[0];
                    send(*x, Tensor::full(self.nodes[x.0].value.shape(), g));
                }
                Op::Scale { x, k } => send(*x, gy.scale(*k)),
                Op::Blended { x, loss } => {
                    let (_, dx) = loss.evaluate(&self.nodes[x.0].value, true)?;
                    send(*x, dx.expect("gradient requested").scale(gy.data()[0]));
                }
            }
        }
        // only leaves keep their gradient
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor<f64>>], v: Var, g: Tensor<f64>) {
    match &mut grads[v.0] {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.0));
        let s = tape.sum(x);
        let g = tape.backward(s, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::full(&[2, 3], 1.0));
    }

    #[test]
    fn second_replay_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let s = tape.sum(x);
        tape.backward(s, &Tensor::scalar(1.0)).unwrap();
        assert!(matches!(tape.backward(s, &Tensor::scalar(1.0)), Err(Error::TapeConsumed)));
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 1, 1, 3], |i| i as f64));
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s, &Tensor::scalar(1.0)).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn blended_norm_zero_residual_has_zero_gradient() {
        let p = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64);
        let loss = BlendedNorm {
            ground_truth: p.clone(),
            teacher: p.clone(),
            mask: None,
            alpha: 0.5,
            scale: 1.0,
            squared: false,
        };
        let (v, g) = loss.evaluate(&p, true).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.unwrap().data().iter().all(|&d| d == 0.0));
    }
}
