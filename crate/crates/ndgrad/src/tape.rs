use std::cell::RefCell;
use std::rc::Rc;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-node backward: given the node's output gradient, produce the
/// gradient contribution for each recorded parent, in parent order.
type BackwardFn<T> = Box<dyn Fn(&Array<T>) -> Vec<Array<T>>>;

struct Node<T: Scalar> {
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    /// Element count of the node's value, for gradient shape checks.
    shape: Vec<usize>,
}

/// Single-writer op recorder. One training step owns one tape; nodes are
/// appended in forward order, which is the topological order backward needs.
pub struct Tape<T: Scalar> {
    inner: Rc<RefCell<Vec<Node<T>>>>,
}

impl<T: Scalar> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(Vec::new())),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().len()
    }

    fn same_tape(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn push(&self, parents: Vec<usize>, shape: Vec<usize>, backward: Option<BackwardFn<T>>) -> usize {
        let mut nodes = self.inner.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            parents,
            backward,
            shape,
        });
        id
    }

    /// Register a differentiable leaf (a parameter or input that wants grads).
    pub fn leaf(&self, value: Array<T>) -> Var<T> {
        let id = self.push(Vec::new(), value.shape().to_vec(), None);
        Var {
            value,
            node: Some((self.clone(), id)),
        }
    }

    /// Reverse sweep from a scalar loss. Visits each node exactly once and
    /// returns gradients for every reachable tracked node; unreachable
    /// leaves read back as zeros.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        let (tape, loss_id) = match &loss.node {
            Some((t, id)) => (t, *id),
            None => return Err(Error::Contract("backward: loss is not tracked on any tape".into())),
        };
        if !self.same_tape(tape) {
            return Err(Error::Contract("backward: loss belongs to a different tape".into()));
        }
        if !loss.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss.value.shape()
            )));
        }

        let nodes = self.inner.borrow();
        let mut grads: Vec<Option<Array<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss_id] = Some(Array::full(loss.value.shape(), T::ONE));

        for id in (0..=loss_id).rev() {
            let node = &nodes[id];
            let Some(grad) = grads[id].clone() else { continue };
            let Some(backward) = &node.backward else { continue };
            let parent_grads = backward(&grad);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                debug_assert_eq!(
                    pg.shape(),
                    &nodes[pid].shape[..],
                    "gradient shape mismatch flowing into node {pid}"
                );
                grads[pid] = Some(match grads[pid].take() {
                    None => pg,
                    Some(acc) => accumulate(&acc, &pg),
                });
            }
        }

        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(a: &Array<T>, b: &Array<T>) -> Array<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let data: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Array::from_vec(a.shape().to_vec(), data).expect("accumulate shape")
}

/// Gradient map keyed by tape node id.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Array<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&Array<T>> {
        let (_, id) = var.node.as_ref()?;
        self.grads.get(*id).and_then(|g| g.as_ref())
    }

    /// Gradient for a tracked var, zeros if no gradient reached it.
    pub fn get_or_zeros(&self, var: &Var<T>) -> Array<T> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Array::zeros(var.value().shape()),
        }
    }
}

/// A value plus optional position on a tape. Untracked vars are constants:
/// ops flow through them but no gradient is recorded.
#[derive(Clone)]
pub struct Var<T: Scalar> {
    value: Array<T>,
    node: Option<(Tape<T>, usize)>,
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.value.shape())
            .field("tracked", &self.node.is_some())
            .finish()
    }
}

impl<T: Scalar> Var<T> {
    pub fn constant(value: Array<T>) -> Self {
        Var { value, node: None }
    }

    pub fn scalar(v: T) -> Self {
        Var::constant(Array::scalar(v))
    }

    pub fn value(&self) -> &Array<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Value copy detached from any tape; gradients do not flow past it.
    pub fn detach(&self) -> Var<T> {
        Var::constant(self.value.clone())
    }

    pub(crate) fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|(_, id)| *id)
    }

    pub(crate) fn tape(&self) -> Option<&Tape<T>> {
        self.node.as_ref().map(|(t, _)| t)
    }
}

/// Resolve the common tape of a set of operands; errors if two distinct
/// tapes are mixed in one op.
pub(crate) fn common_tape<'a, T: Scalar>(vars: &[&'a Var<T>]) -> Result<Option<&'a Tape<T>>> {
    let mut found: Option<&Tape<T>> = None;
    for v in vars {
        if let Some(t) = v.tape() {
            match found {
                None => found = Some(t),
                Some(prev) => {
                    if !prev.same_tape(t) {
                        return Err(Error::Contract("op mixes vars from two different tapes".into()));
                    }
                }
            }
        }
    }
    Ok(found)
}

/// Record an op with arbitrary arity. `backward` maps the output gradient to
/// per-tracked-parent gradients (parents in the order given).
pub(crate) fn record<T: Scalar>(
    inputs: &[&Var<T>],
    out: Array<T>,
    backward: impl Fn(&Array<T>) -> Vec<Array<T>> + 'static,
) -> Result<Var<T>> {
    debug_assert!(out.all_finite(), "op produced non-finite values");
    match common_tape(inputs)? {
        None => Ok(Var::constant(out)),
        Some(tape) => {
            let parents: Vec<usize> = inputs.iter().filter_map(|v| v.node_id()).collect();
            let tracked: Vec<bool> = inputs.iter().map(|v| v.requires_grad()).collect();
            let wrapped = move |g: &Array<T>| -> Vec<Array<T>> {
                let all = backward(g);
                debug_assert_eq!(all.len(), tracked.len());
                all.into_iter()
                    .zip(&tracked)
                    .filter_map(|(pg, &t)| if t { Some(pg) } else { None })
                    .collect()
            };
            let id = tape.push(parents, out.shape().to_vec(), Some(Box::new(wrapped)));
            Ok(Var {
                value: out,
                node: Some((tape.clone(), id)),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_and_constant_tracking() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Array::scalar(2.0));
        let c = Var::constant(Array::scalar(3.0));
        assert!(x.requires_grad());
        assert!(!c.requires_grad());
    }

    #[test]
    fn backward_rejects_nonscalar_loss() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Array::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(tape.backward(&x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_rejects_untracked_loss() {
        let tape = Tape::<f64>::new();
        let c = Var::<f64>::constant(Array::scalar(1.0));
        assert!(tape.backward(&c).is_err());
    }

    #[test]
    fn mixed_tapes_error() {
        let t1 = Tape::<f64>::new();
        let t2 = Tape::<f64>::new();
        let a = t1.leaf(Array::scalar(1.0));
        let b = t2.leaf(Array::scalar(2.0));
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn unreachable_leaf_gets_zeros() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Array::scalar(2.0));
        let y = tape.leaf(Array::scalar(5.0));
        let loss = x.mul(&x).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get_or_zeros(&y).data(), &[0.0]);
        assert_eq!(grads.get_or_zeros(&x).data(), &[4.0]);
    }

    #[test]
    fn detached_branch_contributes_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Array::scalar(3.0));
        let through = x.mul(&x).unwrap();
        let detached = x.detach().mul(&x.detach()).unwrap();
        let loss = through.add(&detached).unwrap();
        let grads = tape.backward(&loss).unwrap();
        // Only the tracked branch contributes: d/dx x^2 = 2x = 6.
        assert_eq!(grads.get_or_zeros(&x).data(), &[6.0]);
    }
}
