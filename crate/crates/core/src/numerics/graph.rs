//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with a
//! closure computing the vector-Jacobian product. [`Graph::backward`] walks the
//! tape once in reverse and deposits parameter gradients in a [`ParamStore`].

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Scalar, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Whether normalization layers use batch statistics (and update running
/// statistics) or the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Vector-Jacobian product: given the output gradient and which parents need
/// a gradient, returns one optional gradient per parent.
pub(crate) type Vjp<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<Var>,
    vjp: Option<Vjp<T>>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    mode: Mode,
    track_params: bool,
    params: BTreeMap<ParamId, Var>,
    leaf_grads: Option<Vec<Option<Tensor<T>>>>,
    branches: Option<u64>,
}

impl<T: Scalar> Graph<T> {
    pub fn new(mode: Mode) -> Self {
        Self { nodes: Vec::new(), mode, track_params: true, params: BTreeMap::new(), leaf_grads: None, branches: None }
    }

    /// Graph that records no derivative information for parameters.
    pub fn inference(mode: Mode) -> Self {
        Self { track_params: false, ..Self::new(mode) }
    }

    /// Starts hashing every branch decision of non-smooth ops (relu signs,
    /// argmax positions), so two evaluations can be compared for whether
    /// they sit on the same smooth piece.
    pub fn track_branches(&mut self) {
        self.branches.get_or_insert(0xcbf2_9ce4_8422_2325);
    }

    pub fn branch_signature(&self) -> Option<u64> {
        self.branches
    }

    pub(crate) fn note_branches(&mut self, decisions: impl Iterator<Item = usize>) {
        if let Some(h) = self.branches.as_mut() {
            for d in decisions {
                *h = (*h ^ d as u64).wrapping_mul(0x0100_0000_01b3);
            }
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that backward differentiates with respect to.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf bound to a stored parameter. Repeated calls with the same id
    /// return the same `Var`, so shared weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone(), self.track_params);
        self.params.insert(id, v);
        v
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Rc::new(value), parents: Vec::new(), vjp: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub(crate) fn rc(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Appends an operation result. The closure is dropped when no parent
    /// needs a gradient.
    pub(crate) fn push(&mut self, value: Tensor<T>, parents: &[Var], vjp: Vjp<T>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Rc::new(value),
            parents: parents.to_vec(),
            vjp: requires_grad.then_some(vjp),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a scalar `loss`. Afterwards every parameter in
    /// `store` holds a gradient (zero for parameters the loss does not reach)
    /// and leaf gradients are available through [`Graph::grad`].
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.leaf_grads.is_some() {
            return Err(Error::BackwardTwice);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(vjp) = &node.vjp else { continue };
            let Some(g) = grads[i].take() else { continue };
            let need: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let pgrads = vjp(&g, &need);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                debug_assert_eq!(pg.shape(), self.nodes[p.0].value.shape(), "gradient shape of node {}", p.0);
                match &mut grads[p.0] {
                    Some(acc) => acc.accumulate(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        store.zero_grads();
        for (&pid, &v) in &self.params {
            if let (Some(g), Some(dst)) = (&grads[v.0], store.get_mut(pid).grad.as_mut()) {
                dst.accumulate(g);
            }
        }
        self.leaf_grads = Some(grads);
        Ok(())
    }

    /// Gradient of the loss with respect to a leaf, after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads.as_ref()?.get(v.0)?.as_ref()
    }
}
