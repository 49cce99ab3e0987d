//! Wengert tape for reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape index order is a
//! topological order and backward is a single reverse sweep.

use crate::error::{NdError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Read-only view handed to backward closures.
pub struct BackwardCtx<'a, T> {
    inputs: Vec<&'a Tensor<T>>,
    needs: Vec<bool>,
    output: &'a Tensor<T>,
}

impl<'a, T> BackwardCtx<'a, T> {
    pub fn input(&self, i: usize) -> &'a Tensor<T> {
        self.inputs[i]
    }

    pub fn output(&self) -> &'a Tensor<T> {
        self.output
    }

    /// Whether input `i` will consume a gradient; closures may skip work
    /// for inputs that will not.
    pub fn needs_grad(&self, i: usize) -> bool {
        self.needs[i]
    }
}

/// Vector-Jacobian product: receives the upstream gradient (same length as
/// the output) and returns one optional gradient per input.
pub type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>, &[T]) -> Vec<Option<Vec<T>>> + Send>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Leaf,
    StopGradient,
    Op,
}

struct Node<T> {
    name: &'static str,
    value: Tensor<T>,
    inputs: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    kind: Kind,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            name: "leaf",
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad,
            kind: Kind::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].name
    }

    /// Records an operation. The backward closure is kept only when some
    /// input requires a gradient.
    pub fn push(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        value: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            name,
            value,
            inputs: inputs.to_vec(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            kind: Kind::Op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Stop-gradient marker: same value, zero gradient upstream.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.nodes.push(Node {
            name: "stop_gradient",
            value,
            inputs: vec![v],
            backward: None,
            requires_grad: false,
            kind: Kind::StopGradient,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn is_stop_gradient(&self, v: Var) -> bool {
        self.nodes[v.0].kind == Kind::StopGradient
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every leaf that
    /// requires one (leaves unreachable from the loss get zeros).
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(NdError::NotScalar(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(NdError::Detached);
        }
        let mut pending: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        pending[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                pending[idx] = None;
                continue;
            }
            let Some(grad) = pending[idx].take() else {
                if node.kind == Kind::Leaf {
                    leaf_grads[idx] = Some(Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            match node.kind {
                Kind::Leaf => {
                    leaf_grads[idx] = Some(
                        Tensor::new(node.value.shape().to_vec(), grad)
                            .expect("gradient matches leaf shape"),
                    );
                }
                Kind::StopGradient => {}
                Kind::Op => {
                    let Some(f) = node.backward.as_ref() else {
                        continue;
                    };
                    let ctx = BackwardCtx {
                        inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                        needs: node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect(),
                        output: &node.value,
                    };
                    let input_grads = f(&ctx, &grad);
                    debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.name);
                    for (input, g) in node.inputs.iter().zip(input_grads) {
                        let Some(g) = g else { continue };
                        if !self.nodes[input.0].requires_grad {
                            continue;
                        }
                        debug_assert_eq!(
                            g.len(),
                            self.nodes[input.0].value.len(),
                            "gradient length from {}",
                            node.name
                        );
                        match &mut pending[input.0] {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(&g) {
                                    *a = *a + *b;
                                }
                            }
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
            }
        }
        // leaves created after the loss node are not reachable
        for (idx, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if node.kind == Kind::Leaf && node.requires_grad {
                leaf_grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
