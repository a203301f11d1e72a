//! Reverse-mode differentiation over a dynamically recorded graph.
//!
//! Every traced tensor owns an `Rc<Node>`. Nodes are created in program
//! order with monotonically increasing ids, so walking reachable nodes in
//! decreasing id order is a valid reverse topological order. Gradients
//! accumulate by summation wherever a node fans out.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use super::elem::Elem;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with gradient recording disabled (inference, data synthesis,
/// finite-difference probes).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Per-parent gradient contributions produced by one backward step.
pub(crate) type BackwardFn<E> = Box<dyn Fn(&[E]) -> Vec<Vec<E>>>;

pub(crate) struct Node<E: Elem> {
    pub(crate) id: u64,
    pub(crate) numel: usize,
    pub(crate) parents: Vec<Rc<Node<E>>>,
    /// None for leaves (parameters, traced inputs).
    pub(crate) backward: Option<BackwardFn<E>>,
    pub(crate) grad: RefCell<Option<Vec<E>>>,
}

impl<E: Elem> Node<E> {
    pub(crate) fn leaf(numel: usize) -> Rc<Self> {
        Rc::new(Node {
            id: next_id(),
            numel,
            parents: Vec::new(),
            backward: None,
            grad: RefCell::new(None),
        })
    }

    pub(crate) fn op(numel: usize, parents: Vec<Rc<Node<E>>>, backward: BackwardFn<E>) -> Rc<Self> {
        Rc::new(Node {
            id: next_id(),
            numel,
            parents,
            backward: Some(backward),
            grad: RefCell::new(None),
        })
    }

    fn accumulate(&self, contribution: &[E]) {
        debug_assert_eq!(contribution.len(), self.numel);
        let mut slot = self.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (g, c) in buf.iter_mut().zip(contribution) {
                    *g += *c;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Backpropagates from `root`, seeding its gradient with ones.
///
/// Intermediate gradients are dropped as soon as they have been consumed;
/// leaf gradients stay on their nodes for the caller to read.
pub(crate) fn backprop<E: Elem>(root: &Rc<Node<E>>) {
    let mut order: Vec<Rc<Node<E>>> = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();
    let mut stack = vec![Rc::clone(root)];
    while let Some(node) = stack.pop() {
        if seen.insert(node.id) {
            for p in &node.parents {
                stack.push(Rc::clone(p));
            }
            order.push(node);
        }
    }
    order.sort_by(|a, b| b.id.cmp(&a.id));

    root.accumulate(&vec![E::ONE; root.numel]);

    for node in order {
        let Some(backward) = node.backward.as_ref() else {
            continue; // leaf: keep its accumulated gradient
        };
        let grad = node.grad.borrow_mut().take();
        let Some(grad) = grad else { continue };
        let contributions = backward(&grad);
        debug_assert_eq!(contributions.len(), node.parents.len());
        for (parent, contribution) in node.parents.iter().zip(&contributions) {
            parent.accumulate(contribution);
        }
    }
}
