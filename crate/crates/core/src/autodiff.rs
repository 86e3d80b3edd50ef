//! Tape-based reverse-mode automatic differentiation.
//!
//! Every forward pass records its operations on a fresh [`Tape`]. Each
//! recorded node owns its output value and, when any of its inputs requires
//! a gradient, a closure mapping the upstream gradient to one gradient per
//! input. [`Tape::backward`] walks the nodes in exact reverse order of
//! execution and may be called once per tape.
//!
//! ```
//! use depthforge::autodiff::Tape;
//! use depthforge::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
//! let y = x.mul(x).unwrap().sum();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Maps the gradient of a node's output to one gradient per input.
pub type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Rc<Tensor>,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, usize>>,
    consumed: Cell<bool>,
}

/// A handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        let id = self.push(Node {
            value: Rc::new(value),
            inputs: Vec::new(),
            requires_grad: false,
            backward: None,
        });
        Var { tape: self, id }
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let id = self.push(Node {
            value: Rc::new(value),
            inputs: Vec::new(),
            requires_grad: true,
            backward: None,
        });
        Var { tape: self, id }
    }

    /// Binds a stored parameter as a leaf. Repeated calls for the same id
    /// return the same leaf so gradients from every use accumulate.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let var = self.leaf(store.value(id).clone());
        self.params.borrow_mut().insert(id, var.id);
        var
    }

    /// Records a custom operation. `backward` receives the output gradient
    /// and must return one gradient per input, shaped like that input.
    pub fn op<'t>(
        &'t self,
        value: Tensor,
        inputs: &[Var<'t>],
        backward: impl Fn(&Tensor) -> Vec<Tensor> + 'static,
    ) -> Var<'t> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        let id = self.push(Node {
            value: Rc::new(value),
            inputs: inputs.iter().map(|v| v.id).collect(),
            requires_grad,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
        });
        Var { tape: self, id }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse pass from a scalar root. Consumes the tape.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let mut all = self.backward_multi(&[root])?;
        Ok(all.pop().expect("one root"))
    }

    /// Reverse passes from several scalar roots over one recorded forward.
    /// Returns one [`Gradients`] per root, in order. Consumes the tape.
    pub fn backward_multi(&self, roots: &[Var<'_>]) -> Result<Vec<Gradients>> {
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        for r in roots {
            let shape = r.shape();
            if r.numel() != 1 {
                return Err(Error::NonScalarRoot(shape));
            }
        }
        self.consumed.set(true);
        let nodes = self.nodes.borrow();
        let params = self.params.borrow().clone();
        let mut out = Vec::with_capacity(roots.len());
        for root in roots {
            let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
            if nodes[root.id].requires_grad {
                grads[root.id] = Some(Tensor::full(nodes[root.id].value.shape(), 1.0));
            }
            for i in (0..=root.id).rev() {
                let node = &nodes[i];
                let Some(backward) = node.backward.as_ref() else {
                    continue;
                };
                let Some(g) = grads[i].take() else {
                    continue;
                };
                let input_grads = backward(&g);
                debug_assert_eq!(input_grads.len(), node.inputs.len());
                for (&input, ig) in node.inputs.iter().zip(input_grads) {
                    if !nodes[input].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(ig.shape(), nodes[input].value.shape());
                    match &mut grads[input] {
                        Some(acc) => acc.add_assign(&ig),
                        slot => *slot = Some(ig),
                    }
                }
            }
            // Only leaves keep their gradient; interior slots were taken above.
            out.push(Gradients {
                grads,
                params: params.clone(),
            });
        }
        Ok(out)
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a single-element var.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }
}

/// Gradients of one root with respect to every leaf that requires one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, usize>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` when the root does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zeros when the root does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .get(&id)
            .and_then(|&node| self.grads.get(node))
            .and_then(|g| g.as_ref())
    }

    /// Every parameter bound on the tape with its gradient, if any.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor>)> + '_ {
        let mut ids: Vec<_> = self.params.keys().copied().collect();
        ids.sort();
        ids.into_iter().map(move |id| (id, self.param(id)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_backward_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.mul(x).unwrap();
        assert!(tape.backward(y).is_ok());
        assert!(matches!(tape.backward(y), Err(Error::TapeConsumed)));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn reuse_accumulates_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        // y = x*x + x  => dy/dx = 2x + 1
        let y = x.mul(x).unwrap().add(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 7.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = x.mul(c).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().item(), 5.0);
    }

    #[test]
    fn multi_root_backward_separates_roots() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let a = x.mul(x).unwrap();
        let b = x.scale(3.0);
        let gs = tape.backward_multi(&[a, b]).unwrap();
        assert_eq!(gs[0].get(x).unwrap().item(), 4.0);
        assert_eq!(gs[1].get(x).unwrap().item(), 3.0);
    }

    #[test]
    fn backward_visits_nodes_in_reverse_execution_order() {
        let order = Rc::new(RefCell::new(Vec::new()));
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let mut cur = x;
        for k in 0..4 {
            let log = order.clone();
            let v = (*cur.value()).clone();
            cur = tape.op(v, &[cur], move |g| {
                log.borrow_mut().push(k);
                vec![g.clone()]
            });
        }
        tape.backward(cur).unwrap();
        assert_eq!(*order.borrow(), vec![3, 2, 1, 0]);
    }
}
