//! Reverse-mode gradient tape over the fixed primitive set.
//!
//! Nodes are appended in evaluation order; [`backward`] replays their adjoints
//! in exactly the reverse order. Parameters enter the tape through
//! [`GradTape::param`] and are identified by the caller's parameter index.

use std::collections::BTreeMap;

use super::ops::{conv2d, conv2d_adjoint, conv2d_kernel_grad, dense_apply, minmax_backward, minmax_with_mask};
use super::{Precision, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    Conv2d { input: NodeId, kernel: NodeId, stride: usize, padding: usize },
    Dense { input: NodeId, weight: NodeId, bias: Option<NodeId> },
    MinMax { input: NodeId, swapped: Vec<bool> },
    ChannelScale { input: NodeId, beta: Option<NodeId>, scale: f64 },
    ChannelBias { input: NodeId, bias: NodeId },
    Add { a: NodeId, b: NodeId },
    Reshape { input: NodeId },
    EquivKernel { weight: NodeId, beta: Option<NodeId>, scale: f64 },
    HalfSqNorm { input: NodeId },
    External { input: NodeId, grad: Tensor },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    precision: Precision,
}

impl GradTape {
    pub fn new(precision: Precision) -> Self {
        GradTape { nodes: Vec::new(), precision }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, mut value: Tensor) -> NodeId {
        value.round_to(self.precision);
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// A non-parameter input. Its cotangent is retained by [`backward`].
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn param(&mut self, param: usize, value: Tensor) -> NodeId {
        self.push(Op::Param(param), value)
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let v = conv2d(self.value(input), self.value(kernel), stride, padding)?;
        Ok(self.push(Op::Conv2d { input, kernel, stride, padding }, v))
    }

    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let v = dense_apply(self.value(input), self.value(weight), bias.map(|b| self.value(b)))?;
        Ok(self.push(Op::Dense { input, weight, bias }, v))
    }

    pub fn minmax(&mut self, input: NodeId) -> Result<NodeId> {
        let (v, swapped) = minmax_with_mask(self.value(input))?;
        Ok(self.push(Op::MinMax { input, swapped }, v))
    }

    /// `y[n, c, ..] = scale * beta[c] * x[n, c, ..]`; `beta = None` means ones.
    pub fn channel_scale(&mut self, input: NodeId, beta: Option<NodeId>, scale: f64) -> Result<NodeId> {
        let x = self.value(input);
        let (c, inner) = channel_layout(x.shape(), "channel_scale")?;
        if let Some(b) = beta {
            if self.value(b).shape() != [c] {
                return Err(Error::shape("channel_scale", format!("beta {:?} for {} channels", self.value(b).shape(), c)));
            }
        }
        let mut out = x.data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            let ch = (i / inner) % c;
            let b = beta.map_or(1.0, |b| self.nodes[b.0].value.data()[ch]);
            *v *= scale * b;
        }
        let v = Tensor::new(x.shape().to_vec(), out)?.check_finite("channel_scale")?;
        Ok(self.push(Op::ChannelScale { input, beta, scale }, v))
    }

    pub fn channel_bias(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let (c, inner) = channel_layout(x.shape(), "channel_bias")?;
        let b = self.value(bias);
        if b.shape() != [c] {
            return Err(Error::shape("channel_bias", format!("bias {:?} for {} channels", b.shape(), c)));
        }
        let mut out = x.data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v += b.data()[(i / inner) % c];
        }
        let v = Tensor::new(x.shape().to_vec(), out)?.check_finite("channel_bias")?;
        Ok(self.push(Op::ChannelBias { input, bias }, v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?.check_finite("add")?;
        Ok(self.push(Op::Add { a, b }, v))
    }

    /// Collapses all axes after the first.
    pub fn flatten(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let n = x.shape()[0];
        let rest: usize = x.shape()[1..].iter().product();
        let v = x.clone().reshape(vec![n, rest])?;
        Ok(self.push(Op::Reshape { input }, v))
    }

    /// `scale * beta[o] * W[o, ..] + Delta`, where `Delta` is the center-tap
    /// identity of a square odd kernel with equal in/out channels.
    pub fn equiv_kernel(&mut self, weight: NodeId, beta: Option<NodeId>, scale: f64) -> Result<NodeId> {
        let w = self.value(weight);
        let b = beta.map(|b| self.value(b));
        let v = equivalent_kernel_value(w, b, scale)?;
        Ok(self.push(Op::EquivKernel { weight, beta, scale }, v))
    }

    /// `0.5 * ||x||^2` as a scalar node.
    pub fn half_sq_norm(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let v = Tensor::scalar(0.5 * x.dot(x));
        self.push(Op::HalfSqNorm { input }, v)
    }

    /// Records a scalar computed outside the tape whose gradient with respect
    /// to `input` is `grad`.
    pub fn attach_loss(&mut self, input: NodeId, value: f64, grad: Tensor) -> Result<NodeId> {
        if grad.shape() != self.value(input).shape() {
            return Err(Error::shape("attach_loss", "gradient shape differs from its input"));
        }
        if !value.is_finite() || !grad.is_finite() {
            return Err(Error::NonFinite { op: "loss" });
        }
        Ok(self.push(Op::External { input, grad }, Tensor::scalar(value)))
    }
}

fn channel_layout(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(op, format!("need a channel axis, got {:?}", shape)));
    }
    Ok((shape[1], shape[2..].iter().product()))
}

pub(crate) fn equivalent_kernel_value(w: &Tensor, beta: Option<&Tensor>, scale: f64) -> Result<Tensor> {
    let s = w.shape();
    if s.len() != 4 || s[0] != s[1] || s[2] != s[3] || s[2] % 2 == 0 {
        return Err(Error::shape(
            "equivalent_kernel",
            format!("need a square odd kernel with equal channels, got {:?}", s),
        ));
    }
    let (n, k) = (s[0], s[2]);
    if let Some(b) = beta {
        if b.shape() != [n] {
            return Err(Error::shape("equivalent_kernel", format!("beta {:?} for {} channels", b.shape(), n)));
        }
    }
    let per_out = n * k * k;
    let mut out: Vec<f64> = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| scale * beta.map_or(1.0, |b| b.data()[i / per_out]) * v)
        .collect();
    let c = k / 2;
    for i in 0..n {
        out[((i * n + i) * k + c) * k + c] += 1.0;
    }
    Tensor::new(s.to_vec(), out)
}

/// Gradients produced by [`backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<usize, Tensor>,
    leaves: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn param(&self, param: usize) -> Result<&Tensor> {
        self.params.get(&param).ok_or(Error::ParamNotOnTape(param))
    }

    /// Cotangent of a leaf node; `None` when nothing flowed into it.
    pub fn leaf(&self, node: NodeId) -> Option<&Tensor> {
        self.leaves.get(&node.0)
    }

    pub fn params(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn into_params(self) -> BTreeMap<usize, Tensor> {
        self.params
    }
}

/// Reverse pass from a scalar node, seeded with 1.
pub fn backward(tape: &GradTape, loss: NodeId) -> Result<Gradients> {
    let v = tape.value(loss);
    if v.len() != 1 {
        return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", v.shape())));
    }
    backward_from(tape, loss, Tensor::full(v.shape(), 1.0))
}

/// Reverse pass from an arbitrary node with an explicit cotangent seed.
pub fn backward_from(tape: &GradTape, output: NodeId, seed: Tensor) -> Result<Gradients> {
    backward_impl(tape, output, seed, None)
}

/// As [`backward_from`], but only leaf cotangents are produced; work on
/// parameter-only branches is skipped.
pub fn backward_leaves(tape: &GradTape, output: NodeId, seed: Tensor) -> Result<Gradients> {
    let mut live = vec![false; tape.nodes.len()];
    for (i, node) in tape.nodes.iter().enumerate() {
        live[i] = match &node.op {
            Op::Leaf => true,
            Op::Param(_) => false,
            Op::Conv2d { input, kernel, .. } => live[input.0] || live[kernel.0],
            Op::Dense { input, weight, bias } => live[input.0] || live[weight.0] || bias.is_some_and(|b| live[b.0]),
            Op::ChannelScale { input, beta, .. } => live[input.0] || beta.is_some_and(|b| live[b.0]),
            Op::ChannelBias { input, bias } => live[input.0] || live[bias.0],
            Op::Add { a, b } => live[a.0] || live[b.0],
            Op::EquivKernel { weight, beta, .. } => live[weight.0] || beta.is_some_and(|b| live[b.0]),
            Op::MinMax { input, .. } | Op::Reshape { input } | Op::HalfSqNorm { input } | Op::External { input, .. } => live[input.0],
        };
    }
    backward_impl(tape, output, seed, Some(&live))
}

fn backward_impl(tape: &GradTape, output: NodeId, seed: Tensor, live: Option<&[bool]>) -> Result<Gradients> {
    if seed.shape() != tape.value(output).shape() {
        return Err(Error::shape("backward", "seed shape differs from output"));
    }
    let mut cot: Vec<Option<Tensor>> = (0..tape.nodes.len()).map(|_| None).collect();
    cot[output.0] = Some(seed);
    let mut grads = Gradients::default();
    let wanted = |id: NodeId| live.is_none_or(|l| l[id.0]);

    let accumulate = |cot: &mut [Option<Tensor>], id: NodeId, g: Tensor, precision: Precision| -> Result<()> {
        if !wanted(id) {
            return Ok(());
        }
        let mut g = g;
        g.round_to(precision);
        match &mut cot[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    };

    let prec = tape.precision;
    for idx in (0..=output.0).rev() {
        let node = &tape.nodes[idx];
        let g = match &node.op {
            Op::Leaf => {
                if let Some(g) = cot[idx].take() {
                    grads.leaves.insert(idx, g);
                }
                continue;
            }
            Op::Param(p) => {
                if let Some(g) = cot[idx].take() {
                    match grads.params.get_mut(p) {
                        Some(acc) => acc.add_assign(&g)?,
                        None => {
                            grads.params.insert(*p, g);
                        }
                    }
                }
                continue;
            }
            _ => match cot[idx].take() {
                Some(g) => g,
                None => continue,
            },
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Conv2d { input, kernel, stride, padding } => {
                let x = tape.value(*input);
                let k = tape.value(*kernel);
                if wanted(*input) {
                    let dx = conv2d_adjoint(&g, k, *stride, *padding, x.shape())?;
                    accumulate(&mut cot, *input, dx, prec)?;
                }
                if wanted(*kernel) {
                    let dk = conv2d_kernel_grad(x, &g, k.shape(), *stride, *padding)?;
                    accumulate(&mut cot, *kernel, dk, prec)?;
                }
            }
            Op::Dense { input, weight, bias } => {
                let x = tape.value(*input);
                let w = tape.value(*weight);
                let (n, d) = (x.shape()[0], x.shape()[1]);
                let m = w.shape()[0];
                let mut dx = vec![0.0; n * d];
                let mut dw = vec![0.0; m * d];
                let mut db = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        let gij = g.data()[i * m + j];
                        db[j] += gij;
                        for k in 0..d {
                            dx[i * d + k] += gij * w.data()[j * d + k];
                            dw[j * d + k] += gij * x.data()[i * d + k];
                        }
                    }
                }
                accumulate(&mut cot, *input, Tensor::new(vec![n, d], dx)?, prec)?;
                accumulate(&mut cot, *weight, Tensor::new(vec![m, d], dw)?, prec)?;
                if let Some(b) = bias {
                    accumulate(&mut cot, *b, Tensor::new(vec![m], db)?, prec)?;
                }
            }
            Op::MinMax { input, swapped } => {
                accumulate(&mut cot, *input, minmax_backward(&g, swapped), prec)?;
            }
            Op::ChannelScale { input, beta, scale } => {
                let x = tape.value(*input);
                let (c, inner) = channel_layout(x.shape(), "channel_scale")?;
                let mut dx = g.data().to_vec();
                let mut dbeta = vec![0.0; c];
                for (i, v) in dx.iter_mut().enumerate() {
                    let ch = (i / inner) % c;
                    let b = beta.map_or(1.0, |b| tape.value(b).data()[ch]);
                    dbeta[ch] += scale * *v * x.data()[i];
                    *v *= scale * b;
                }
                accumulate(&mut cot, *input, Tensor::new(x.shape().to_vec(), dx)?, prec)?;
                if let Some(b) = beta {
                    accumulate(&mut cot, *b, Tensor::new(vec![c], dbeta)?, prec)?;
                }
            }
            Op::ChannelBias { input, bias } => {
                let (c, inner) = channel_layout(g.shape(), "channel_bias")?;
                let mut db = vec![0.0; c];
                for (i, v) in g.data().iter().enumerate() {
                    db[(i / inner) % c] += v;
                }
                accumulate(&mut cot, *bias, Tensor::new(vec![c], db)?, prec)?;
                accumulate(&mut cot, *input, g, prec)?;
            }
            Op::Add { a, b } => {
                accumulate(&mut cot, *b, g.clone(), prec)?;
                accumulate(&mut cot, *a, g, prec)?;
            }
            Op::Reshape { input } => {
                let shape = tape.value(*input).shape().to_vec();
                accumulate(&mut cot, *input, g.reshape(shape)?, prec)?;
            }
            Op::EquivKernel { weight, beta, scale } => {
                let w = tape.value(*weight);
                let n = w.shape()[0];
                let per_out = w.len() / n;
                let mut dw = g.data().to_vec();
                let mut dbeta = vec![0.0; n];
                for (i, v) in dw.iter_mut().enumerate() {
                    let o = i / per_out;
                    let b = beta.map_or(1.0, |b| tape.value(b).data()[o]);
                    dbeta[o] += scale * *v * w.data()[i];
                    *v *= scale * b;
                }
                accumulate(&mut cot, *weight, Tensor::new(w.shape().to_vec(), dw)?, prec)?;
                if let Some(b) = beta {
                    accumulate(&mut cot, *b, Tensor::new(vec![n], dbeta)?, prec)?;
                }
            }
            Op::HalfSqNorm { input } => {
                let x = tape.value(*input);
                accumulate(&mut cot, *input, x.scale(g.data()[0]), prec)?;
            }
            Op::External { input, grad } => {
                accumulate(&mut cot, *input, grad.scale(g.data()[0]), prec)?;
            }
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn half_sq_norm_gradient_is_input() {
        let mut tape = GradTape::new(Precision::F64);
        let x = Tensor::from_vec(vec![1.5, -2.0, 0.25]);
        let p = tape.param(0, x.clone());
        let l = tape.half_sq_norm(p);
        let g = backward(&tape, l).unwrap();
        assert_eq!(g.param(0).unwrap(), &x);
    }

    #[test]
    fn scalar_dense_gradient_is_input() {
        let mut tape = GradTape::new(Precision::F64);
        let x = tape.leaf(Tensor::new(vec![1, 1], vec![4.0]).unwrap());
        let w = tape.param(3, Tensor::new(vec![1, 1], vec![0.7]).unwrap());
        let y = tape.dense(x, w, None).unwrap();
        let y = tape.flatten(y).unwrap();
        let one = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let l = tape.attach_loss(y, tape.value(y).data()[0], one).unwrap();
        let g = backward(&tape, l).unwrap();
        assert_eq!(g.param(3).unwrap().data(), &[4.0]);
        assert!(matches!(g.param(1), Err(Error::ParamNotOnTape(1))));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = GradTape::new(Precision::F64);
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(backward(&tape, x).is_err());
    }

    #[test]
    fn shared_param_gradients_accumulate() {
        // loss = 0.5 * ||w + w||^2 = 2 ||w||^2 -> gradient 4w
        let mut tape = GradTape::new(Precision::F64);
        let w = Tensor::from_vec(vec![1.0, 2.0]);
        let a = tape.param(0, w.clone());
        let b = tape.param(0, w.clone());
        let s = tape.add(a, b).unwrap();
        let l = tape.half_sq_norm(s);
        let g = backward(&tape, l).unwrap();
        assert_eq!(g.param(0).unwrap().data(), &[4.0, 8.0]);
    }

    /// Central differences through conv, channel scale, minmax, flatten, dense.
    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = Tensor::randn(&[2, 2, 4, 4], 1.0, &mut rng);
        let k0 = Tensor::randn(&[2, 2, 3, 3], 0.5, &mut rng);
        let b0 = Tensor::randn(&[2], 1.0, &mut rng);
        let w0 = Tensor::randn(&[3, 32], 0.3, &mut rng);

        let eval = |k: &Tensor, b: &Tensor, w: &Tensor| -> (GradTape, NodeId, NodeId) {
            let mut t = GradTape::new(Precision::F64);
            let x = t.leaf(x0.clone());
            let kp = t.param(0, k.clone());
            let bp = t.param(1, b.clone());
            let wp = t.param(2, w.clone());
            let ek = t.equiv_kernel(kp, Some(bp), 0.7).unwrap();
            let y = t.conv2d(x, ek, 1, 1).unwrap();
            let y = t.channel_scale(y, Some(bp), 0.5).unwrap();
            let y = t.minmax(y).unwrap();
            let y = t.flatten(y).unwrap();
            let z = t.dense(y, wp, None).unwrap();
            let l = t.half_sq_norm(z);
            (t, l, x)
        };
        let (tape, l, xn) = eval(&k0, &b0, &w0);
        let g = backward(&tape, l).unwrap();
        assert!(g.leaf(xn).is_some());
        let seed = Tensor::full(tape.value(l).shape(), 1.0);
        let only = backward_leaves(&tape, l, seed).unwrap();
        assert_eq!(only.leaf(xn), g.leaf(xn));
        assert_eq!(only.params().count(), 0);
        let h = 1e-6;
        let params = [k0.clone(), b0.clone(), w0.clone()];
        for p in 0..3 {
            for i in 0..params[p].len().min(12) {
                let mut plus = params.clone();
                let mut minus = params.clone();
                plus[p].data_mut()[i] += h;
                minus[p].data_mut()[i] -= h;
                let (tp, lp, _) = eval(&plus[0], &plus[1], &plus[2]);
                let (tm, lm, _) = eval(&minus[0], &minus[1], &minus[2]);
                let fd = (tp.value(lp).data()[0] - tm.value(lm).data()[0]) / (2.0 * h);
                let an = g.param(p).unwrap().data()[i];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "param {p} idx {i}: {fd} vs {an}");
            }
        }
    }
}
