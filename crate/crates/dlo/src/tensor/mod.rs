//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! The graph is built eagerly: every primitive records its parents and a
//! backward closure on the output node. `backward()` on a scalar loss
//! replays the graph in reverse topological order. Scalar precision is
//! generic: `f32` for training, `f64` for gradient-check tolerances.

pub mod ops;

use std::cell::{Ref, RefCell, RefMut};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::{Float, FromPrimitive};

use crate::error::{DloError, Result};

/// Scalar element type stored in a checkpoint payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl Dtype {
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dtype::F32 => write!(f, "f32"),
            Dtype::F64 => write!(f, "f64"),
        }
    }
}

/// Element type usable by the tensor engine.
pub trait Scalar: Float + FromPrimitive + fmt::Debug + Default + 'static {
    const DTYPE: Dtype;
    fn from_double(v: f64) -> Self;
    fn to_double(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_double(v: f64) -> Self {
        v as f32
    }
    fn to_double(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_double(v: f64) -> Self {
        v
    }
    fn to_double(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Backward closure: given the node's output gradient and output data,
/// accumulate gradients into the parents.
type BackwardFn<E> = Box<dyn Fn(&[E], &[E], &[Tensor<E>])>;

struct Inner<E: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    grad: RefCell<Option<Vec<E>>>,
    requires_grad: bool,
    needs_grad: bool,
    parents: Vec<Tensor<E>>,
    backward: Option<BackwardFn<E>>,
}

/// A dense row-major tensor, cheaply clonable (shared node).
pub struct Tensor<E: Scalar> {
    inner: Rc<Inner<E>>,
}

impl<E: Scalar> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Scalar> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl<E: Scalar> Tensor<E> {
    fn build(
        shape: Vec<usize>,
        data: Vec<E>,
        requires_grad: bool,
        parents: Vec<Tensor<E>>,
        backward: Option<BackwardFn<E>>,
    ) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data length mismatch"
        );
        let needs_grad = requires_grad || parents.iter().any(|p| p.inner.needs_grad);
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                needs_grad,
                parents,
                backward,
            }),
        }
    }

    /// Constant tensor (no gradient tracked).
    pub fn new(shape: &[usize], data: Vec<E>) -> Self {
        Self::build(shape.to_vec(), data, false, Vec::new(), None)
    }

    /// Leaf parameter participating in gradient computation.
    pub fn param(shape: &[usize], data: Vec<E>) -> Self {
        Self::build(shape.to_vec(), data, true, Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape, vec![E::zero(); shape.iter().product()])
    }

    pub fn scalar(v: E) -> Self {
        Self::new(&[1], vec![v])
    }

    pub(crate) fn from_op(
        shape: &[usize],
        data: Vec<E>,
        parents: Vec<Tensor<E>>,
        backward: BackwardFn<E>,
    ) -> Self {
        let needs = parents.iter().any(|p| p.inner.needs_grad);
        let backward = if needs { Some(backward) } else { None };
        Self::build(shape.to_vec(), data, false, parents, backward)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<E>> {
        self.inner.data.borrow()
    }

    /// Mutable access to the raw buffer. Reserved for the optimizer's
    /// in-place parameter update between steps.
    pub fn data_mut(&self) -> RefMut<'_, Vec<E>> {
        self.inner.data.borrow_mut()
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Detached copy of this tensor's values as a fresh constant.
    pub fn detach(&self) -> Tensor<E> {
        Tensor::new(self.shape(), self.data().clone())
    }

    pub fn item(&self) -> E {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.data()[0]
    }

    pub(crate) fn accum_grad(&self, delta: &[E]) {
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(delta) {
                    *a = *a + *b;
                }
            }
            None => {
                *g = Some(delta.to_vec());
            }
        }
    }

    /// Reverse-mode gradient computation from a scalar output.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(DloError::Shape(format!(
                "backward() requires a scalar output, got shape {:?}",
                self.shape()
            )));
        }
        // Iterative post-order DFS; each node visited exactly once.
        let mut order: Vec<Tensor<E>> = Vec::new();
        let mut visited: std::collections::HashSet<u64> = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor<E>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.inner.id);
        while let Some((node, child_idx)) = stack.pop() {
            if child_idx < node.inner.parents.len() {
                let parent = node.inner.parents[child_idx].clone();
                stack.push((node, child_idx + 1));
                if parent.inner.needs_grad && visited.insert(parent.inner.id) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        self.accum_grad(&[E::one()]);
        for node in order.iter().rev() {
            if let Some(back) = &node.inner.backward {
                let grad = node.inner.grad.borrow().clone();
                if let Some(grad) = grad {
                    let data = node.inner.data.borrow();
                    back(&grad, &data, &node.inner.parents);
                }
            }
        }
        Ok(())
    }
}
