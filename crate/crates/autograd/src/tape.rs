use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::Tensor;

/// Computes parent gradients from the output gradient. The second argument
/// flags which parents require a gradient; entries for the others may be `None`.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Append-only record of a computation.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    track_branches: bool,
    signature: Cell<u64>,
}

/// Handle to a value recorded on a [`Tape`].
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

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), track_branches: false, signature: Cell::new(0) }
    }

    /// A tape that hashes every data-dependent branch (ReLU sign patterns,
    /// clamps, permutation choices) into [`Tape::branch_signature`]. Finite
    /// difference checks use it to discard probes that straddle a kink.
    pub fn with_branch_tracking() -> Self {
        Tape { track_branches: true, ..Self::new() }
    }

    pub fn tracks_branches(&self) -> bool {
        self.track_branches
    }

    pub fn note_branch(&self, tag: u64) {
        if self.track_branches {
            let s = self.signature.get();
            self.signature.set((s ^ tag).wrapping_mul(0x100_0000_01b3).rotate_left(17));
        }
    }

    /// Hash a boolean pattern into the branch signature.
    pub fn note_pattern(&self, bits: impl Iterator<Item = bool>) {
        if self.track_branches {
            let mut h: u64 = 0xcbf2_9ce4_8422_2325;
            for (i, b) in bits.enumerate() {
                if b {
                    h = (h ^ i as u64).wrapping_mul(0x100_0000_01b3);
                }
            }
            self.note_branch(h);
        }
    }

    pub fn branch_signature(&self) -> u64 {
        self.signature.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let id = self.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents: Vec::new(),
            backward: None,
        });
        Var { tape: self, id }
    }

    /// Record an operation. `backward` is kept only when some parent needs a
    /// gradient, so inference through frozen components stays allocation-light.
    pub fn op<'t, F>(&'t self, value: Tensor, parents: &[Var<'t>], backward: F) -> Var<'t>
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let node = Node {
            value: Rc::new(value),
            requires_grad,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
        };
        Var { tape: self, id: self.push(node) }
    }

    /// Reverse sweep from `root`, seeding its gradient with ones.
    ///
    /// Only leaf gradients are retained in the result.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let root_value = &nodes[root.id].value;
        grads[root.id] = Some(Tensor::full(root_value.shape(), 1.0));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let flags: Vec<bool> =
                node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &flags);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), &flag) in node.parents.iter().zip(parent_grads).zip(&flags) {
                if !flag {
                    continue;
                }
                let Some(pg) = pg else { continue };
                debug_assert_eq!(pg.len(), nodes[p].value.len(), "gradient size for node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
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

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }
}
