use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

use super::{Array, Element};

thread_local! {
    static STRICT: Cell<bool> = const { Cell::new(false) };
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Whether the current thread runs in strict mode: reductions along
/// attention and pooling axes are made independent of element order, so
/// permuting tokens permutes outputs bit-exactly.
pub fn is_strict() -> bool {
    STRICT.with(|s| s.get())
}

pub fn set_strict(on: bool) {
    STRICT.with(|s| s.set(on));
}

/// Enables strict mode on this thread until dropped.
pub struct StrictGuard {
    prev: bool,
}

pub fn strict_mode() -> StrictGuard {
    let prev = is_strict();
    set_strict(true);
    StrictGuard { prev }
}

impl Drop for StrictGuard {
    fn drop(&mut self) {
        set_strict(self.prev);
    }
}

/// Maps the output gradient to one optional gradient per parent.
/// Arguments: output gradient, parent values, output value.
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&Array<T>, &[&Array<T>], &Array<T>) -> Result<Vec<Option<Array<T>>>>>;

enum Origin<T: Element> {
    Leaf,
    Op {
        name: &'static str,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    },
    Freed,
}

struct Node<T: Element> {
    id: u64,
    value: RefCell<Array<T>>,
    grad: RefCell<Option<Array<T>>>,
    tracked: bool,
    origin: RefCell<Origin<T>>,
}

/// Dense tensor that optionally records the operations producing it.
///
/// Cloning is cheap and shares the underlying node. Leaves created with
/// [`Tensor::param`] carry a gradient buffer that [`Tensor::backward`]
/// accumulates into; intermediate results only keep the closure needed to
/// push gradients to their parents.
#[derive(Clone)]
pub struct Tensor<T: Element>(Rc<Node<T>>);

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match &*self.0.origin.borrow() {
            Origin::Leaf => "leaf",
            Origin::Op { name, .. } => name,
            Origin::Freed => "freed",
        };
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("tracked", &self.0.tracked)
            .field("origin", &name)
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    fn leaf(value: Array<T>, tracked: bool) -> Self {
        let grad = tracked.then(|| Array::zeros(value.shape().to_vec()));
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value: RefCell::new(value),
            grad: RefCell::new(grad),
            tracked,
            origin: RefCell::new(Origin::Leaf),
        }))
    }

    /// Untracked leaf.
    pub fn constant(value: Array<T>) -> Self {
        Self::leaf(value, false)
    }

    /// Tracked leaf with a zeroed gradient buffer.
    pub fn param(value: Array<T>) -> Self {
        Self::leaf(value, true)
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Ok(Self::constant(Array::from_f64(shape, values)?))
    }

    pub fn scalar(value: T) -> Self {
        Self::constant(Array::scalar(value))
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::constant(Array::zeros(shape))
    }

    pub(crate) fn from_op(
        name: &'static str,
        value: Array<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Result<Self> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        let tracked = parents.iter().any(|p| p.0.tracked);
        if !tracked {
            return Ok(Self::constant(value));
        }
        Ok(Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value: RefCell::new(value),
            grad: RefCell::new(None),
            tracked,
            origin: RefCell::new(Origin::Op {
                name,
                parents,
                backward,
            }),
        })))
    }

    pub fn value(&self) -> Ref<'_, Array<T>> {
        self.0.value.borrow()
    }

    pub fn to_array(&self) -> Array<T> {
        self.0.value.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.value.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.0.value.borrow().numel()
    }

    pub fn item(&self) -> T {
        self.0.value.borrow().item()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.value.borrow().data().to_vec()
    }

    pub fn is_tracked(&self) -> bool {
        self.0.tracked
    }

    pub fn is_leaf(&self) -> bool {
        matches!(&*self.0.origin.borrow(), Origin::Leaf)
    }

    /// Whether two handles refer to the same node.
    pub fn same(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Accumulated gradient of a tracked leaf.
    pub fn grad(&self) -> Option<Array<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Array<T>>> {
        self.0.grad.borrow()
    }

    pub fn zero_grad(&self) {
        if let Some(g) = self.0.grad.borrow_mut().as_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
    }

    /// Overwrites the gradient buffer of a tracked leaf.
    pub fn set_grad(&self, grad: Array<T>) -> Result<()> {
        if !self.0.tracked {
            return Err(Error::param("set_grad on an untracked tensor"));
        }
        if grad.shape() != self.shape().as_slice() {
            return Err(Error::Shape {
                op: "set_grad",
                lhs: self.shape(),
                rhs: grad.shape().to_vec(),
            });
        }
        *self.0.grad.borrow_mut() = Some(grad);
        Ok(())
    }

    /// Replaces the value of a leaf, keeping its shape.
    pub fn set_value(&self, value: Array<T>) -> Result<()> {
        let mut cur = self.0.value.borrow_mut();
        if cur.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_value",
                lhs: cur.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *cur = value;
        Ok(())
    }

    /// In-place mutation of a leaf's values (optimizer and EMA updates).
    pub fn update(&self, f: impl FnOnce(&mut [T])) {
        debug_assert!(self.is_leaf());
        f(self.0.value.borrow_mut().data_mut());
    }

    /// Untracked copy of the current value.
    pub fn detach(&self) -> Self {
        Self::constant(self.to_array())
    }

    /// Reverse-mode pass from this scalar, accumulating into tracked leaves.
    ///
    /// The recorded graph is released as it is consumed; a second call on
    /// the same result fails with [`Error::GraphFreed`].
    pub fn backward(&self) -> Result<()> {
        let shape = self.shape();
        if self.numel() != 1 {
            return Err(Error::NotScalar(shape));
        }
        if !self.0.tracked {
            return Err(Error::param("loss does not depend on any tracked tensor"));
        }
        let mut nodes: Vec<Tensor<T>> = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.0.id) {
                continue;
            }
            match &*t.0.origin.borrow() {
                Origin::Freed => return Err(Error::GraphFreed),
                Origin::Leaf => {}
                Origin::Op { parents, .. } => {
                    stack.extend(parents.iter().filter(|p| p.0.tracked).cloned());
                }
            }
            nodes.push(t);
        }
        // creation order is a topological order
        nodes.sort_unstable_by(|a, b| b.0.id.cmp(&a.0.id));

        let mut pending: HashMap<u64, Array<T>> = HashMap::new();
        pending.insert(self.0.id, Array::ones(shape));
        for node in nodes {
            let Some(g) = pending.remove(&node.0.id) else {
                continue;
            };
            let origin = std::mem::replace(&mut *node.0.origin.borrow_mut(), Origin::Freed);
            match origin {
                Origin::Leaf => {
                    *node.0.origin.borrow_mut() = Origin::Leaf;
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.add_assign(&g),
                        None => *slot = Some(g),
                    }
                }
                Origin::Op {
                    name,
                    parents,
                    backward,
                } => {
                    let values: Vec<Ref<'_, Array<T>>> =
                        parents.iter().map(|p| p.0.value.borrow()).collect();
                    let refs: Vec<&Array<T>> = values.iter().map(|r| &**r).collect();
                    let out = node.0.value.borrow();
                    let grads = backward(&g, &refs, &out)?;
                    drop(out);
                    drop(refs);
                    drop(values);
                    for (p, pg) in parents.iter().zip(grads) {
                        let Some(pg) = pg else { continue };
                        if !p.0.tracked {
                            continue;
                        }
                        if !pg.all_finite() {
                            return Err(Error::NonFinite(format!("gradient through {name}")));
                        }
                        match pending.get_mut(&p.0.id) {
                            Some(acc) => acc.add_assign(&pg),
                            None => {
                                pending.insert(p.0.id, pg);
                            }
                        }
                    }
                }
                Origin::Freed => return Err(Error::GraphFreed),
            }
        }
        Ok(())
    }
}
