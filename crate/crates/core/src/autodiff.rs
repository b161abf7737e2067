//! Reverse-mode tape over the primitives in [`crate::ops`].
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is
//! a valid topological order. Parameter leaves remember their [`ParamId`];
//! [`ParamStore::accumulate`](crate::params::ParamStore::accumulate) folds
//! their gradients back into the store.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{shape_err, Error, Result};
use crate::ops::{self, BatchNormCache};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T: Real> {
    Leaf,
    Param(ParamId),
    Conv { input: Var, kernel: Var, bias: Option<Var>, stride: usize },
    BatchNorm { input: Var, gamma: Var, beta: Var, cache: BatchNormCache<T> },
    Relu(Var),
    MaxPool { input: Var, argmax: Vec<usize> },
    Upsample(Var),
    Concat { a: Var, b: Var, ca: usize },
    Softmax(Var),
    Add(Var, Var),
    /// Scalar head with a precomputed gradient w.r.t. `input`.
    Scalar { input: Var, grad: Tensor<T> },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Batch statistics to fold into running buffers after a training forward.
#[derive(Clone, Debug)]
pub struct StatUpdate<T: Real> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
    pub momentum: T,
}

pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    stat_updates: Vec<StatUpdate<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), stat_updates: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input (no gradient is propagated further).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let out = ops::conv2d(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
        )?;
        Ok(self.push(out, Op::Conv { input, kernel, bias, stride }))
    }

    /// Batch norm; `running` selects inference mode.
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&Tensor<T>, &Tensor<T>)>,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (out, cache) =
            ops::batchnorm(self.value(input), self.value(gamma), self.value(beta), running, eps)?;
        let (m, v) = (cache.batch_mean.clone(), cache.batch_var.clone());
        let var = self.push(out, Op::BatchNorm { input, gamma, beta, cache });
        Ok((var, m, v))
    }

    pub fn record_stat_update(&mut self, update: StatUpdate<T>) {
        self.stat_updates.push(update);
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut self.stat_updates)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        self.push(out, Op::Relu(input))
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = ops::maxpool2(self.value(input))?;
        Ok(self.push(out, Op::MaxPool { input, argmax }))
    }

    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let out = ops::upsample2(self.value(input))?;
        Ok(self.push(out, Op::Upsample(input)))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        let ca = self.value(a).dims()[1];
        Ok(self.push(out, Op::Concat { a, b, ca }))
    }

    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let out = ops::softmax_channels(self.value(input))?;
        Ok(self.push(out, Op::Softmax(input)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Push a scalar computed outside the tape together with its gradient
    /// with respect to `input` (used by the loss functions).
    pub fn scalar(&mut self, input: Var, value: T, grad: Tensor<T>) -> Result<Var> {
        if grad.dims() != self.value(input).dims() {
            return shape_err("scalar node: gradient dims differ from input dims");
        }
        Ok(self.push(Tensor::scalar(value), Op::Scalar { input, grad }))
    }

    /// `Σ weights ⊙ input` as a scalar node.
    pub fn weighted_sum(&mut self, input: Var, weights: Tensor<T>) -> Result<Var> {
        let x = self.value(input);
        if x.dims() != weights.dims() {
            return shape_err("weighted_sum: dims mismatch");
        }
        let value = x.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        self.scalar(input, value, weights)
    }

    /// Hash of every non-differentiable branch decision taken on this tape
    /// (ReLU input signs, max-pool winners). Two evaluations with equal
    /// signatures lie in the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(input) => {
                    for v in self.value(*input).data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got dims {:?}",
                self.value(root).dims()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).dims(), T::one()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let push = |v: Var, delta: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| {
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                            *a = *a + *d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::Conv { input, kernel, bias, stride } => {
                    let cg = ops::conv2d_backward(self.value(*input), self.value(*kernel), *stride, &g)?;
                    push(*input, cg.input, &mut grads);
                    push(*kernel, cg.kernel, &mut grads);
                    if let Some(b) = bias {
                        push(*b, cg.bias, &mut grads);
                    }
                }
                Op::BatchNorm { input, gamma, beta, cache } => {
                    let bg = ops::batchnorm_backward(self.value(*gamma), cache, &g)?;
                    push(*input, bg.input, &mut grads);
                    push(*gamma, bg.gamma, &mut grads);
                    push(*beta, bg.beta, &mut grads);
                }
                Op::Relu(input) => {
                    push(*input, ops::relu_backward(self.value(*input), &g), &mut grads);
                }
                Op::MaxPool { input, argmax } => {
                    let gin = ops::maxpool2_backward(self.value(*input).dims(), argmax, &g);
                    push(*input, gin, &mut grads);
                }
                Op::Upsample(input) => push(*input, ops::upsample2_backward(&g)?, &mut grads),
                Op::Concat { a, b, ca } => {
                    let (ga, gb) = ops::concat_backward(*ca, &g)?;
                    push(*a, ga, &mut grads);
                    push(*b, gb, &mut grads);
                }
                Op::Softmax(input) => {
                    push(*input, ops::softmax_backward(&node.value, &g)?, &mut grads);
                }
                Op::Add(a, b) => {
                    push(*a, g.clone(), &mut grads);
                    push(*b, g, &mut grads);
                }
                Op::Scalar { input, grad } => {
                    let s = g.data()[0];
                    push(*input, grad.map(|v| v * s), &mut grads);
                }
            }
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Result of [`Tape::backward`]. Only leaf and parameter gradients are kept.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of parameter leaves that the root depends on.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|&(id, i)| self.grads[i].as_ref().map(|g| (id, g)))
    }
}
