//! Reverse-mode tape over [`Tensor`] values.
//!
//! Every op records its inputs and a backward closure that maps the output
//! gradient to input gradients. Gradients are only materialised for inputs that
//! (transitively) depend on a leaf created with [`Graph::param`]. A graph built
//! with [`Graph::no_grad`] records values only.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub struct BackwardArgs<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad: &'a Tensor,
    /// `needs[i]` is false when input `i` does not require a gradient.
    pub needs: Vec<bool>,
}

pub type BackwardFn = Box<dyn Fn(&BackwardArgs) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), record: true }
    }

    /// Forward-only graph: `param` leaves are treated as constants.
    pub fn no_grad() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), record: false }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        let rg = self.record;
        self.leaf(value, rg)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, inputs: Vec::new(), backward: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an op. `backward` is dropped when no input requires a gradient.
    pub fn push<F>(&mut self, value: Tensor, inputs: &[Var], backward: F) -> Var
    where
        F: Fn(&BackwardArgs) -> Vec<Option<Tensor>> + 'static,
    {
        let requires_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let backward: Option<BackwardFn> =
            if requires_grad { Some(Box::new(backward)) } else { None };
        self.nodes.push(Node { value, inputs: inputs.to_vec(), backward, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Accumulates d`root`/d(node) for every node; `root` must be a single element.
    pub fn backward(&mut self, root: Var) {
        self.backward_with(root, Tensor::full(self.nodes[root.0].value.shape(), 1.0));
    }

    /// Backpropagates an explicit upstream gradient for `root`.
    pub fn backward_with(&mut self, root: Var, seed: Tensor) {
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return;
        }
        self.grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let Some(grad) = self.grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Some(bw) = &node.backward {
                let args = BackwardArgs {
                    inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                    output: &node.value,
                    grad: &grad,
                    needs: node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect(),
                };
                let input_grads = bw(&args);
                debug_assert_eq!(input_grads.len(), node.inputs.len());
                let inputs = node.inputs.clone();
                for (v, g) in inputs.into_iter().zip(input_grads) {
                    let Some(g) = g else { continue };
                    if !self.nodes[v.0].requires_grad {
                        continue;
                    }
                    match &mut self.grads[v.0] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            // Leaves keep their gradient; interior gradients are released.
            if self.nodes[idx].inputs.is_empty() {
                self.grads[idx] = Some(grad);
            }
        }
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}
