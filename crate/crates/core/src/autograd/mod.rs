//! Tape-based reverse-mode differentiation over [`Tensor`].
//!
//! A [`Graph`] records every operation applied during a forward pass. Values
//! are kept on the tape; each differentiable op stores a closure that maps
//! the output gradient to input gradients. Nodes that do not depend on any
//! parameter or leaf carry no closure, so constant inputs (images, labels)
//! cost nothing on the backward pass.

mod basic;
mod conv;
mod norm;
mod stereo;

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tensor::Tensor;

pub use stereo::{convex_weights_shape, CONVEX_TAPS};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// `(grad_out, inputs, output, needs_grad) -> per-input gradient`.
type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

pub struct Graph<'p> {
    nodes: Vec<Node>,
    params: Option<&'p ParamStore>,
    param_vars: BTreeMap<String, Var>,
    branches: Option<u64>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            param_vars: BTreeMap::new(),
            branches: None,
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            nodes: Vec::new(),
            params: Some(params),
            param_vars: BTreeMap::new(),
            branches: None,
        }
    }

    /// Start fingerprinting the branch taken by every piecewise op (ReLU
    /// signs, bilinear cells, loss regimes). Two forward passes with equal
    /// [`Graph::branch_signature`] lie on the same smooth piece.
    pub fn track_branches(&mut self) {
        self.branches = Some(0xcbf2_9ce4_8422_2325);
    }

    pub fn branch_signature(&self) -> Option<u64> {
        self.branches
    }

    pub(crate) fn tracking_branches(&self) -> bool {
        self.branches.is_some()
    }

    pub(crate) fn note_branches(&mut self, keys: impl IntoIterator<Item = i64>) {
        if let Some(h) = self.branches.as_mut() {
            for k in keys {
                *h = (*h ^ k as u64).wrapping_mul(0x100_0000_01b3);
            }
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params.expect("graph was built without a parameter store")
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, true)
    }

    /// The leaf holding parameter `name`; repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.param_vars.get(name) {
            return v;
        }
        let value = self.params().expect(name).clone();
        let v = self.leaf(value);
        self.param_vars.insert(name.to_string(), v);
        v
    }

    /// A copy of `v` cut from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    #[inline]
    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, backward: Option<BackwardFn>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record an op. The closure is dropped when no input needs gradient.
    pub(crate) fn op(&mut self, value: Tensor, inputs: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let parents = inputs.iter().map(|v| v.0).collect();
        if requires_grad {
            self.push(value, parents, Some(backward), true)
        } else {
            self.push(value, parents, None, false)
        }
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.value(loss).numel(),
            1,
            "backward() needs a scalar, got shape {:?}",
            self.shape(loss)
        );
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
            let parent_grads = backward(&grad, &inputs, &node.value, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, g), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // Leaves carry no closure, so their accumulated gradients are still
        // in place.
        Gradients { grads }
    }

    /// Gradients of every parameter touched by this graph, keyed by name.
    /// Parameters that did not influence the loss get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.param_vars
            .iter()
            .map(|(name, &v)| {
                let g = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shape(v)));
                (name.clone(), g)
            })
            .collect()
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}
