//! Wengert-list tape for reverse-mode differentiation.
//!
//! Every primitive that has at least one gradient-carrying input appends one
//! node holding its backward closure. Nodes are appended after their inputs,
//! so walking the list backwards is a valid reverse topological order.

use std::rc::Rc;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Maps the gradient of an op's output to gradients of its inputs.
///
/// `needs[i]` tells whether input `i` wants a gradient; the closure may return
/// `None` in slots that are not needed.
pub type BackwardFn<S> = Box<dyn Fn(&Tensor<S>, &[bool]) -> Vec<Option<Tensor<S>>>>;

/// A tensor value, optionally linked to a tape node.
#[derive(Clone)]
pub struct Var<S: Real = f32> {
    node: Option<usize>,
    value: Rc<Tensor<S>>,
}

impl<S: Real> Var<S> {
    pub fn value(&self) -> &Tensor<S> {
        &self.value
    }

    pub(crate) fn value_rc(&self) -> Rc<Tensor<S>> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[S] {
        self.value.data()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn node(&self) -> Option<usize> {
        self.node
    }
}

impl<S: Real> std::fmt::Debug for Var<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(node={:?}, {:?})", self.node, self.value)
    }
}

struct Node<S: Real> {
    name: &'static str,
    shape: Vec<usize>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<S>>,
}

/// Multiply-accumulate counters, split the way cost models report them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpStats {
    /// MACs inside convolution and linear layers.
    pub layer_macs: u64,
    /// MACs in attention score and aggregation products.
    pub attention_macs: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BackwardStats {
    /// Recorded non-leaf ops whose backward closure ran.
    pub ops_visited: usize,
    pub ops_recorded: usize,
}

pub struct Tape<S: Real = f32> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
    grad_enabled: bool,
    stats: OpStats,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), grad_enabled: true, stats: OpStats::default() }
    }

    /// A tape that never records; forward evaluation only.
    pub fn no_grad() -> Self {
        Tape { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn stats(&self) -> OpStats {
        self.stats
    }

    pub(crate) fn count_layer_macs(&mut self, macs: u64) {
        self.stats.layer_macs += macs;
    }

    pub(crate) fn count_attention_macs(&mut self, macs: u64) {
        self.stats.attention_macs += macs;
    }

    /// A leaf the tape differentiates with respect to (ignored if recording is off).
    pub fn leaf(&mut self, value: Tensor<S>) -> Var<S> {
        let node = self.grad_enabled.then(|| {
            self.nodes.push(Node {
                name: "leaf",
                shape: value.shape().to_vec(),
                inputs: Vec::new(),
                backward: None,
            });
            self.nodes.len() - 1
        });
        Var { node, value: Rc::new(value) }
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var<S> {
        Var { node: None, value: Rc::new(value) }
    }

    /// Detached copy of a var sharing the same storage.
    pub fn detach(&self, v: &Var<S>) -> Var<S> {
        Var { node: None, value: v.value_rc() }
    }

    /// Records the result of a primitive.
    ///
    /// Fails with [`Error::NonFinite`] when the output holds NaN or Inf.
    pub fn record(
        &mut self,
        name: &'static str,
        inputs: &[&Var<S>],
        output: Tensor<S>,
        backward: impl Fn(&Tensor<S>, &[bool]) -> Vec<Option<Tensor<S>>> + 'static,
    ) -> Result<Var<S>> {
        if !output.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let tracked = self.grad_enabled && inputs.iter().any(|v| v.node.is_some());
        if !tracked {
            return Ok(Var { node: None, value: Rc::new(output) });
        }
        self.nodes.push(Node {
            name,
            shape: output.shape().to_vec(),
            inputs: inputs.iter().map(|v| v.node.unwrap_or(usize::MAX)).collect(),
            backward: Some(Box::new(backward)),
        });
        Ok(Var { node: Some(self.nodes.len() - 1), value: Rc::new(output) })
    }

    /// Back-propagates from a one-element output.
    ///
    /// Leaf gradients stay available through [`Tape::grad`]; intermediate
    /// gradients are dropped as soon as they have been propagated.
    pub fn backward(&mut self, output: &Var<S>) -> Result<BackwardStats> {
        if output.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must hold one value, got {:?}", output.shape()),
            ));
        }
        let mut stats = BackwardStats {
            ops_recorded: self.nodes.iter().filter(|n| n.backward.is_some()).count(),
            ..Default::default()
        };
        let Some(root) = output.node else {
            self.grads = vec![None; self.nodes.len()];
            return Ok(stats);
        };
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor::full(output.shape().to_vec(), S::one()));
        for id in (0..=root).rev() {
            let node = &self.nodes[id];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(g) = grads[id].take() else { continue };
            stats.ops_visited += 1;
            let needs: Vec<bool> = node.inputs.iter().map(|&i| i != usize::MAX).collect();
            let contributions = backward(&g, &needs);
            debug_assert_eq!(contributions.len(), node.inputs.len(), "{}", node.name);
            for (&input, contribution) in node.inputs.iter().zip(contributions) {
                if input == usize::MAX {
                    continue;
                }
                let Some(c) = contribution else { continue };
                if c.shape() != self.nodes[input].shape.as_slice() {
                    return Err(Error::shape(
                        node.name,
                        format!(
                            "backward produced {:?} for input of shape {:?}",
                            c.shape(),
                            self.nodes[input].shape
                        ),
                    ));
                }
                if !c.all_finite() {
                    return Err(Error::NonFinite { op: node.name });
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&c),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        self.grads = grads;
        Ok(stats)
    }

    /// Gradient accumulated for `v` by the last [`Tape::backward`] call.
    pub fn grad(&self, v: &Var<S>) -> Option<&Tensor<S>> {
        v.node.and_then(|id| self.grads.get(id)).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros when no path reached it.
    pub fn grad_or_zeros(&self, v: &Var<S>) -> Tensor<S> {
        self.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape().to_vec()))
    }
}
