//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients into every node that depends on a trainable leaf.
//! Every op validates shapes up front and rejects non-finite outputs.

mod conv;
mod linalg;
mod nn;
mod shape;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<S> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    BroadcastTo(Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Pad {
        x: Var,
        axis: usize,
        before: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    MatMul(Var, Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<S>,
        rstd: Vec<S>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<S>,
        eps: f64,
    },
    DynConv {
        x: Var,
        k: Var,
        b: Var,
    },
    DepthwiseConv {
        x: Var,
        k: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    Resize(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
    Mse {
        x: Var,
        target: Vec<S>,
    },
}

struct Node<S> {
    value: Vec<S>,
    shape: Vec<usize>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradient buffers, allocated lazily per node.
pub(crate) struct Grads<'a, S> {
    slots: &'a mut [Option<Vec<S>>],
    nodes: &'a [Node<S>],
}

impl<S: Real> Grads<'_, S> {
    /// Mutable gradient buffer of `v`, or `None` when `v` needs no gradient.
    pub(crate) fn slot(&mut self, v: Var) -> Option<&mut [S]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(self.slots[v.0].get_or_insert_with(|| vec![S::ZERO; len]))
    }
}

pub struct Graph<S: Real> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    bound: HashMap<String, Var>,
    bound_order: Vec<(String, Var)>,
    overrides: HashMap<String, Vec<S>>,
}

impl<S: Real> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            bound: HashMap::new(),
            bound_order: Vec::new(),
            overrides: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let value = t.data().iter().map(|&v| S::from_f32(v)).collect();
        self.leaf(value, t.shape().to_vec(), false)
    }

    pub fn constant_values(&mut self, shape: &[usize], value: Vec<S>) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() || shape.is_empty() {
            return Err(Error::dim(
                "constant",
                format!("shape {shape:?} vs {} values", value.len()),
            ));
        }
        Ok(self.leaf(value, shape.to_vec(), false))
    }

    /// Leaf whose gradient is tracked iff `t.requires_grad`.
    pub fn input(&mut self, t: &Tensor) -> Var {
        let value = t.data().iter().map(|&v| S::from_f32(v)).collect();
        self.leaf(value, t.shape().to_vec(), t.requires_grad)
    }

    /// Binds the named parameter of `store`, once per graph.
    ///
    /// Later calls with the same name return the same node so that shared
    /// weights accumulate a single gradient.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        let value = match self.overrides.get(name) {
            Some(v) => {
                if v.len() != t.numel() {
                    return Err(Error::dim(
                        "param",
                        format!("override for `{name}` has wrong length"),
                    ));
                }
                v.clone()
            }
            None => t.data().iter().map(|&v| S::from_f32(v)).collect(),
        };
        let var = self.leaf(value, t.shape().to_vec(), t.requires_grad);
        self.bound.insert(name.to_string(), var);
        self.bound_order.push((name.to_string(), var));
        Ok(var)
    }

    /// Replaces the values a later [`Graph::param`] call will bind for `name`.
    pub fn override_param(&mut self, name: &str, values: Vec<S>) {
        self.overrides.insert(name.to_string(), values);
    }

    /// Parameters bound so far, in binding order.
    pub fn bound_params(&self) -> &[(String, Var)] {
        &self.bound_order
    }

    fn leaf(&mut self, value: Vec<S>, shape: Vec<usize>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            shape,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(
        &mut self,
        name: &'static str,
        value: Vec<S>,
        shape: Vec<usize>,
        op: Op<S>,
        parents: &[Var],
    ) -> Result<Var> {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        if let Some(index) = value.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name, index });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> S {
        let val = self.value(v);
        assert_eq!(
            val.len(),
            1,
            "scalar() on a node of shape {:?}",
            self.shape(v)
        );
        val[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let data = self.value(v).iter().map(|x| x.to_f32()).collect();
        Tensor::new(self.shape(v).to_vec(), data).expect("graph values are finite")
    }

    /// Gradient of the last [`Graph::backward`] root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every bound trainable parameter, keyed by name.
    pub fn param_grads(&self) -> Vec<(String, Vec<S>)> {
        self.bound_order
            .iter()
            .filter(|(_, v)| self.requires_grad(*v))
            .map(|(name, v)| {
                let g = self
                    .grad(*v)
                    .map(<[S]>::to_vec)
                    .unwrap_or_else(|| vec![S::ZERO; self.value(*v).len()]);
                (name.clone(), g)
            })
            .collect()
    }

    /// Reverse pass from a one-element root.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("root must hold one value, has shape {:?}", self.shape(root)),
            ));
        }
        let mut slots: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            slots[root.0] = Some(vec![S::ONE]);
        }
        for i in (0..=root.0).rev() {
            let Some(out_grad) = slots[i].take() else {
                continue;
            };
            let mut grads = Grads {
                slots: &mut slots,
                nodes: &self.nodes,
            };
            backward_node(&self.nodes, i, &out_grad, &mut grads);
            slots[i] = Some(out_grad);
        }
        self.grads = slots;
        Ok(())
    }
}

fn backward_node<S: Real>(nodes: &[Node<S>], i: usize, g: &[S], grads: &mut Grads<'_, S>) {
    let node = &nodes[i];
    let out = Var(i);
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => shape::add_backward(nodes, out, *a, *b, g, grads),
        Op::Mul(a, b) => shape::mul_backward(nodes, out, *a, *b, g, grads),
        Op::BroadcastTo(a) => shape::broadcast_to_backward(nodes, out, *a, g, grads),
        Op::Scale(a, c) => {
            let c = S::from_f64(*c);
            if let Some(ga) = grads.slot(*a) {
                for (x, &gi) in ga.iter_mut().zip(g) {
                    *x += c * gi;
                }
            }
        }
        Op::Gelu(a) => {
            let x = &nodes[a.0].value;
            if let Some(ga) = grads.slot(*a) {
                for ((gx, &xi), &gi) in ga.iter_mut().zip(x).zip(g) {
                    *gx += gi * nn::gelu_grad(xi);
                }
            }
        }
        Op::Tanh(a) => {
            let y = &node.value;
            if let Some(ga) = grads.slot(*a) {
                for ((gx, &yi), &gi) in ga.iter_mut().zip(y).zip(g) {
                    *gx += gi * (S::ONE - yi * yi);
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(ga) = grads.slot(*a) {
                for (x, &gi) in ga.iter_mut().zip(g) {
                    *x += gi;
                }
            }
        }
        Op::Permute(a, axes) => shape::permute_backward(nodes, *a, axes, g, grads),
        Op::Concat(inputs, axis) => shape::concat_backward(nodes, out, inputs, *axis, g, grads),
        Op::Slice { x, axis, start } => {
            shape::slice_backward(nodes, out, *x, *axis, *start, g, grads)
        }
        Op::Pad { x, axis, before } => shape::pad_backward(nodes, *x, *axis, *before, g, grads),
        Op::SumAll(a) => {
            if let Some(ga) = grads.slot(*a) {
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }
        }
        Op::MeanAll(a) => {
            let n = S::from_f64(nodes[a.0].value.len() as f64);
            if let Some(ga) = grads.slot(*a) {
                for x in ga.iter_mut() {
                    *x += g[0] / n;
                }
            }
        }
        Op::SumAxis(a, axis) => shape::sum_axis_backward(nodes, *a, *axis, g, grads),
        Op::MatMul(a, b) => linalg::matmul_backward(nodes, *a, *b, g, grads),
        Op::Softmax(a, axis) => nn::softmax_backward(nodes, out, *a, *axis, g, grads),
        Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            rstd,
        } => nn::layer_norm_backward(nodes, *x, *gamma, *beta, mean, rstd, g, grads),
        Op::L2Normalize { x, norms, eps } => {
            nn::l2_normalize_backward(nodes, out, *x, norms, *eps, g, grads)
        }
        Op::DynConv { x, k, b } => conv::dyn_conv_backward(nodes, *x, *k, *b, g, grads),
        Op::DepthwiseConv { x, k, b } => conv::dyn_conv_backward(nodes, *x, *k, *b, g, grads),
        Op::Conv2d { x, w, b } => conv::conv2d_backward(nodes, *x, *w, *b, g, grads),
        Op::Resize(a) => conv::resize_backward(nodes, out, *a, g, grads),
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => nn::cross_entropy_backward(nodes, *logits, labels, probs, g, grads),
        Op::Mse { x, target } => {
            let xv = &nodes[x.0].value;
            let n = S::from_f64(xv.len() as f64);
            let two = S::from_f64(2.0);
            if let Some(gx) = grads.slot(*x) {
                for ((d, &v), &t) in gx.iter_mut().zip(xv).zip(target) {
                    *d += g[0] * two * (v - t) / n;
                }
            }
        }
    }
}

/// Product of a dimension list.
pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Sizes before, along and after `axis`.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}
