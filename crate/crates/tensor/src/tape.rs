//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its forward value and, when any
//! input requires a gradient, a closure that propagates the output gradient
//! back into its inputs. `backward` sweeps the nodes in reverse insertion
//! order, which is a valid topological order by construction.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn = Box<dyn Fn(&mut Backward<'_>)>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// View handed to a backward closure: the upstream gradient, read access to
/// every forward value, and accumulation slots for input gradients.
pub struct Backward<'a> {
    grad_out: &'a [f64],
    out: &'a Tensor,
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl<'a> Backward<'a> {
    pub fn grad_out(&self) -> &'a [f64] {
        self.grad_out
    }

    /// Forward value of the node being differentiated.
    pub fn output(&self) -> &'a Tensor {
        self.out
    }

    pub fn value(&self, v: Var) -> &'a Tensor {
        &self.nodes[v.0].value
    }

    pub fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulator for `v`, or `None` when `v` does not require one.
    pub fn grad_mut(&mut self, v: Var) -> Option<&mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    pub fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if let Some(g) = self.grad_mut(v) {
            f(g);
        }
    }
}

/// Records operations for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, None)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
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

    /// Appends a node computed outside the tape. `backward` is kept only if
    /// one of `inputs` requires a gradient.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: impl Fn(&mut Backward<'_>) + 'static) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let bw: Option<BackwardFn> = if requires_grad { Some(Box::new(backward)) } else { None };
        self.push(value, requires_grad, bw)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, backward: Option<BackwardFn>) -> Var {
        self.nodes.push(Node { value, requires_grad, backward });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Propagates d(root)/d(node) to every node that requires a gradient.
    /// `root` must hold a single element.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_value = &self.nodes[root.0].value;
        if root_value.numel() != 1 {
            return Err(shape_err("backward", "scalar root", root_value.shape()));
        }
        for g in &mut self.grads {
            *g = None;
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(grad_out) = self.grads[i].take() else {
                continue;
            };
            if let Some(bw) = &self.nodes[i].backward {
                let (before, _) = self.grads.split_at_mut(i);
                let mut ctx =
                    Backward { grad_out: &grad_out, out: &self.nodes[i].value, nodes: &self.nodes, grads: before };
                bw(&mut ctx);
            }
            self.grads[i] = Some(grad_out);
        }
        Ok(())
    }

    /// Gradient of the last `backward` root w.r.t. `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor shaped like `v`, zero-filled when unreached.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}
