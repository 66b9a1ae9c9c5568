//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so [`Graph::backward`] simply walks the tape in reverse.
//! Fan-out gradients are accumulated in that fixed order, making repeated
//! backward passes bit-identical.

use crate::kernels::{self, Activation, PoolIndices};
use crate::tensor::same_shape;
use crate::{Error, LabelMap, Result, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    FullyConnected {
        x: Var,
        weight: Var,
        bias: Option<Var>,
    },
    MaxPool {
        input: Var,
        indices: PoolIndices,
        k: usize,
    },
    MaxUnpool {
        input: Var,
        indices: PoolIndices,
        k: usize,
    },
    Upsample {
        input: Var,
        k: usize,
    },
    Activation(Activation, Var),
    Softmax(Var),
    Concat(Vec<Var>),
    SpatialMean(Var),
    ChannelScale {
        u: Var,
        gate: Var,
    },
    PixelScale {
        u: Var,
        gate: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    /// Losses keep their input gradient from the forward pass.
    Loss {
        input: Var,
        grad: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// ReLU on/off masks and pooling argmaxes of a tape, in recording order.
#[derive(Clone, Debug, Default)]
pub struct Kinks {
    relu: Vec<Vec<bool>>,
    pools: Vec<PoolIndices>,
}

/// Tape of recorded operations and their values.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    frozen: Option<Kinks>,
    relus_seen: usize,
    pools_seen: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose ReLUs and max pools replay the choices in `kinks`
    /// instead of looking at their inputs. Recording more of them than
    /// `kinks` holds is an error.
    pub fn with_frozen_kinks(kinks: Kinks) -> Self {
        Self {
            frozen: Some(kinks),
            ..Self::default()
        }
    }

    /// Every ReLU mask and pooling argmax recorded so far.
    pub fn kinks(&self) -> Kinks {
        let mut kinks = Kinks::default();
        for node in &self.nodes {
            match &node.op {
                Op::Activation(Activation::Relu, _) => kinks
                    .relu
                    .push(node.value.data().iter().map(|&v| v > 0.0).collect()),
                Op::MaxPool { indices, .. } => kinks.pools.push(indices.clone()),
                _ => {}
            }
        }
        kinks
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Records an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = kernels::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            out,
        ))
    }

    pub fn fully_connected(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let out = kernels::fully_connected(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
        )?;
        Ok(self.push(Op::FullyConnected { x, weight, bias }, out))
    }

    pub fn max_pool2d(&mut self, input: Var, k: usize) -> Result<(Var, PoolIndices)> {
        let (out, indices) = match &self.frozen {
            None => kernels::max_pool2d(self.value(input), k)?,
            Some(kinks) => {
                let indices = kinks
                    .pools
                    .get(self.pools_seen)
                    .ok_or_else(|| Error::shape("frozen tape has no pooling left to replay"))?
                    .clone();
                self.pools_seen += 1;
                (kernels::pool_at(self.value(input), &indices, k)?, indices)
            }
        };
        let v = self.push(
            Op::MaxPool {
                input,
                indices: indices.clone(),
                k,
            },
            out,
        );
        Ok((v, indices))
    }

    pub fn max_unpool2d(&mut self, input: Var, indices: &PoolIndices, k: usize) -> Result<Var> {
        let out = kernels::max_unpool2d(self.value(input), indices, k)?;
        Ok(self.push(
            Op::MaxUnpool {
                input,
                indices: indices.clone(),
                k,
            },
            out,
        ))
    }

    pub fn upsample_nearest(&mut self, input: Var, k: usize) -> Result<Var> {
        let out = kernels::upsample_nearest(self.value(input), k)?;
        Ok(self.push(Op::Upsample { input, k }, out))
    }

    /// A ReLU on a frozen tape panics if the tape runs out of masks or the
    /// next mask does not fit `x`.
    pub fn activation(&mut self, kind: Activation, x: Var) -> Var {
        let out = match (&self.frozen, kind) {
            (Some(kinks), Activation::Relu) => {
                let mask = &kinks.relu[self.relus_seen];
                assert_eq!(
                    mask.len(),
                    self.value(x).len(),
                    "frozen ReLU mask does not fit"
                );
                self.relus_seen += 1;
                let mut out = self.value(x).clone();
                for (v, &on) in out.data_mut().iter_mut().zip(mask) {
                    if !on {
                        *v = 0.0;
                    }
                }
                out
            }
            _ => kernels::activation(kind, self.value(x)),
        };
        self.push(Op::Activation(kind, x), out)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(Activation::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn softmax_channels(&mut self, logits: Var) -> Result<Var> {
        let out = kernels::softmax_channels(self.value(logits))?;
        Ok(self.push(Op::Softmax(logits), out))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if let [only] = parts {
            return Ok(*only);
        }
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = kernels::concat_channels(&values)?;
        Ok(self.push(Op::Concat(parts.to_vec()), out))
    }

    /// Global average pooling, `(N, C, H, W) -> (N, C)`.
    pub fn spatial_mean(&mut self, u: Var) -> Result<Var> {
        let out = kernels::spatial_mean(self.value(u))?;
        Ok(self.push(Op::SpatialMean(u), out))
    }

    /// Scales every channel plane of `u` by `gate[n, c]`.
    pub fn channel_scale(&mut self, u: Var, gate: Var) -> Result<Var> {
        let out = kernels::channel_scale(self.value(u), self.value(gate))?;
        Ok(self.push(Op::ChannelScale { u, gate }, out))
    }

    /// Scales every pixel column of `u` by `gate[n, 0, i, j]`.
    pub fn pixel_scale(&mut self, u: Var, gate: Var) -> Result<Var> {
        let out = kernels::pixel_scale(self.value(u), self.value(gate))?;
        Ok(self.push(Op::PixelScale { u, gate }, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x.shape(), y.shape(), "add")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x.shape(), y.shape(), "mul")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(Op::Scale(x, factor), out)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), out)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(Op::Mean(x), out)
    }

    /// Median-frequency style weighted logistic loss, averaged over pixels.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        labels: &LabelMap,
        weights: &[f64],
    ) -> Result<Var> {
        let (loss, grad) = kernels::weighted_cross_entropy(self.value(logits), labels, weights)?;
        Ok(self.push(
            Op::Loss {
                input: logits,
                grad,
            },
            Tensor::scalar(loss),
        ))
    }

    pub fn soft_dice(&mut self, probs: Var, labels: &LabelMap) -> Result<Var> {
        let (loss, grad) = kernels::soft_dice(self.value(probs), labels)?;
        Ok(self.push(Op::Loss { input: probs, grad }, Tensor::scalar(loss)))
    }

    /// Gradients of the scalar `loss` w.r.t. every leaf recorded before it.
    ///
    /// Leaves that do not influence the loss get an all-zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0].value;
        if root.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(root.shape().to_vec(), vec![1.0])?);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match node.op {
                Op::Leaf => Some(g.unwrap_or_else(|| Tensor::zeros(node.value.shape()))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let cg = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    g,
                    *stride,
                    *padding,
                    bias.is_some(),
                )?;
                acc(*input, cg.input)?;
                acc(*weight, cg.weight)?;
                if let (Some(b), Some(gb)) = (bias, cg.bias) {
                    acc(*b, gb)?;
                }
            }
            Op::FullyConnected { x, weight, bias } => {
                let (gx, gw, gb) = kernels::fully_connected_backward(
                    self.value(*x),
                    self.value(*weight),
                    g,
                    bias.is_some(),
                )?;
                acc(*x, gx)?;
                acc(*weight, gw)?;
                if let (Some(b), Some(gb)) = (bias, gb) {
                    acc(*b, gb)?;
                }
            }
            Op::MaxPool { input, indices, k } => {
                let shape = self.value(*input).shape();
                acc(*input, kernels::max_pool2d_backward(shape, indices, *k, g)?)?;
            }
            Op::MaxUnpool { input, indices, k } => {
                acc(*input, kernels::max_unpool2d_backward(indices, *k, g)?)?;
            }
            Op::Upsample { input, k } => {
                let shape = self.value(*input).shape();
                acc(*input, kernels::upsample_nearest_backward(shape, *k, g)?)?;
            }
            Op::Activation(kind, x) => {
                acc(*x, kernels::activation_backward(*kind, &node.value, g))?;
            }
            Op::Softmax(x) => acc(*x, kernels::softmax_channels_backward(&node.value, g)?)?,
            Op::Concat(parts) => {
                let channels: Vec<usize> =
                    parts.iter().map(|&p| self.value(p).shape()[1]).collect();
                for (p, gp) in parts.iter().zip(kernels::split_channels(g, &channels)?) {
                    acc(*p, gp)?;
                }
            }
            Op::SpatialMean(u) => {
                let shape = self.value(*u).shape();
                acc(*u, kernels::spatial_mean_backward(shape, g)?)?;
            }
            Op::ChannelScale { u, gate } => {
                let (gu, gg) =
                    kernels::channel_scale_backward(self.value(*u), self.value(*gate), g)?;
                acc(*u, gu)?;
                acc(*gate, gg)?;
            }
            Op::PixelScale { u, gate } => {
                let (gu, gg) = kernels::pixel_scale_backward(self.value(*u), self.value(*gate), g)?;
                acc(*u, gu)?;
                acc(*gate, gg)?;
            }
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(y.data()).map(|(p, q)| p * q).collect(),
                )?;
                let gb = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(x.data()).map(|(p, q)| p * q).collect(),
                )?;
                acc(*a, ga)?;
                acc(*b, gb)?;
            }
            Op::Scale(x, factor) => acc(*x, g.map(|v| v * factor))?,
            Op::Sum(x) => {
                let s = g.item()?;
                acc(*x, Tensor::full(self.value(*x).shape(), s))?;
            }
            Op::Mean(x) => {
                let t = self.value(*x);
                let s = g.item()? / t.len() as f64;
                acc(*x, Tensor::full(t.shape(), s))?;
            }
            Op::Loss { input, grad } => {
                let s = g.item()?;
                acc(*input, grad.map(|v| v * s))?;
            }
        }
        Ok(())
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient w.r.t. a leaf; `None` for non-leaf values or leaves created
    /// after the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but panics when `v` is not a leaf.
    pub fn wrt(&self, v: Var) -> &Tensor {
        self.get(v)
            .expect("gradient requested for a non-leaf value")
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
