//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every value produced during a forward pass is appended to a [`Tape`] as a
//! node holding its value and a closure that maps the output gradient to
//! gradients of its parents. Node ids are assigned in creation order, so the
//! tape is already topologically sorted and backward is a single reverse sweep.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::Tensor;

/// Maps an upstream gradient to per-parent gradients. The boolean slice marks
/// which parents need a gradient; entries for the others may be `None`.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Node { value: Rc::new(value), parents: vec![], requires_grad: false, backward: None })
    }

    /// A leaf whose gradient is collected by [`Tape::backward`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Node { value: Rc::new(value), parents: vec![], requires_grad: true, backward: None })
    }

    /// Records an operation with an explicit backward rule.
    pub fn op<'t>(&'t self, parents: &[Var<'t>], value: Tensor, backward: BackwardFn) -> Var<'t> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        self.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            requires_grad,
            backward: if requires_grad { Some(backward) } else { None },
        })
    }

    pub fn value(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Full reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        self.backward_until(root, 0)
    }

    /// Reverse sweep that only expands nodes with id `>= cutoff`. Parents below
    /// the cutoff still receive their accumulated gradient but are not expanded
    /// further, which bounds the cost when only late parameters are of interest.
    pub fn backward_until(&self, root: Var<'_>, cutoff: usize) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        let root_val = &nodes[root.id].value;
        assert_eq!(root_val.numel(), 1, "backward root must be scalar");
        grads[root.id] = Some(Tensor::full(root_val.shape(), 1.0));
        for id in (cutoff..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(g) = grads[id].take() else { continue };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "gradient shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn get_id(&self, id: usize) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}
