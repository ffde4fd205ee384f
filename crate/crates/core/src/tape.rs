//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Forward execution appends nodes; `inputs` always reference earlier
//! indices, so the graph is acyclic by construction and a single reverse
//! sweep in index order applies the chain rule. The sweep is sequential and
//! accumulation order is fixed, so gradients are bit-identical across runs.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use indexmap::IndexMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// One differentiable operation: given the upstream gradient and the
/// recorded forward values, produce the gradient for each input.
pub(crate) trait TapeOp<T: Element>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one entry per input; `None` marks a non-differentiable input
    /// (e.g. integer labels folded into the op).
    fn backward(
        &self,
        grad_out: &Tensor<T>,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

/// Leaf values: inputs, parameters, constants. No gradient flows past them.
pub(crate) struct Leaf;

impl<T: Element> TapeOp<T> for Leaf {
    fn name(&self) -> &'static str {
        "leaf"
    }
    fn backward(
        &self,
        _grad_out: &Tensor<T>,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        Vec::new()
    }
}

pub(crate) struct Node<T: Element> {
    pub(crate) op: Box<dyn TapeOp<T>>,
    pub(crate) inputs: Vec<NodeId>,
    pub(crate) value: Tensor<T>,
    /// Name of the model parameter this leaf mirrors, if any.
    pub(crate) param: Option<String>,
}

pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Box::new(Leaf), Vec::new(), value, None)
    }

    /// Leaf tied to a named model parameter; its gradient is retrievable by
    /// name after backward.
    pub fn param_leaf(&mut self, name: &str, value: Tensor<T>) -> NodeId {
        self.push(Box::new(Leaf), Vec::new(), value, Some(name.to_string()))
    }

    pub(crate) fn push(
        &mut self,
        op: Box<dyn TapeOp<T>>,
        inputs: Vec<NodeId>,
        value: Tensor<T>,
        param: Option<String>,
    ) -> NodeId {
        let id = NodeId(self.nodes.len());
        debug_assert!(inputs.iter().all(|i| i.0 < id.0), "tape inputs must precede node");
        debug_assert!(
            value.all_finite(),
            "non-finite forward value out of op {}",
            op.name()
        );
        self.nodes.push(Node {
            op,
            inputs,
            value,
            param,
        });
        id
    }

    /// Reverse sweep from a scalar root. Every node reachable from the root
    /// receives a gradient; parameters not reached simply stay absent (the
    /// consumer treats absent as zero).
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward root must be scalar, got shape {:?}",
                root_value.shape()
            )));
        }

        let mut node_grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        node_grads[root.0] = Some(Tensor::full(root_value.shape(), T::one()));

        for id in (0..=root.0).rev() {
            let Some(grad) = node_grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.inputs.is_empty() {
                let input_values: Vec<&Tensor<T>> =
                    node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
                let contributions = node.op.backward(&grad, &input_values, &node.value);
                debug_assert_eq!(contributions.len(), node.inputs.len());
                for (input, contribution) in node.inputs.iter().zip(contributions) {
                    let Some(contribution) = contribution else {
                        continue;
                    };
                    debug_assert_eq!(
                        contribution.shape(),
                        self.nodes[input.0].value.shape(),
                        "gradient shape must match forward output of input node"
                    );
                    match &mut node_grads[input.0] {
                        Some(acc) => acc.add_scaled(&contribution, T::one()),
                        slot @ None => *slot = Some(contribution),
                    }
                }
            }
            node_grads[id] = Some(grad);
        }

        let mut params = IndexMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.param {
                params.insert(name.clone(), NodeId(idx));
            }
        }
        Ok(Gradients { node_grads, params })
    }
}

/// Result of a backward sweep: per-node gradients plus a name index for
/// parameter leaves.
pub struct Gradients<T: Element> {
    node_grads: Vec<Option<Tensor<T>>>,
    params: IndexMap<String, NodeId>,
}

impl<T: Element> Gradients<T> {
    pub fn node(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.node_grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a named parameter; `None` when the parameter was not
    /// reached from the loss.
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|id| self.node(*id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn unreached_parameter_has_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let _unused = tape.param_leaf("w_unused", Tensor::ones(&[3]));
        let loss = tape.leaf(Tensor::scalar(1.0));
        let grads = tape.backward(loss).unwrap();
        assert!(grads.param("w_unused").is_none());
    }
}
