use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

use crate::{Result, Scalar, TensorError};

pub(crate) struct Inner<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    /// Same length as `data`; present iff `requires_grad`.
    pub grad: Option<Vec<T>>,
    pub requires_grad: bool,
}

/// A dense N-dimensional array, row-major, with an optional gradient buffer.
///
/// `Tensor` is a cheap handle (`clone` shares storage). Images and feature
/// grids use the `[batch, channels, height, width]` layout; scalars are
/// rank 0. Gradient buffers exist exactly when `requires_grad` is set and
/// are zero until a backward pass accumulates into them.
pub struct Tensor<T: Scalar> {
    inner: Rc<RefCell<Inner<T>>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            inner.shape, inner.requires_grad
        )
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Result<Self> {
        let expected = numel(&shape);
        if data.len() != expected {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        let grad = requires_grad.then(|| vec![T::zero(); data.len()]);
        Ok(Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape,
                data,
                grad,
                requires_grad,
            })),
        })
    }

    pub fn zeros(shape: Vec<usize>, requires_grad: bool) -> Self {
        let n = numel(&shape);
        Self::from_vec(shape, vec![T::zero(); n], requires_grad).expect("consistent by construction")
    }

    pub fn full(shape: Vec<usize>, value: T, requires_grad: bool) -> Self {
        let n = numel(&shape);
        Self::from_vec(shape, vec![value; n], requires_grad).expect("consistent by construction")
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: T) -> Self {
        Self::from_vec(vec![], vec![value], false).expect("consistent by construction")
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Toggling on allocates a zero gradient buffer; toggling off drops it.
    pub fn set_requires_grad(&self, requires_grad: bool) {
        let mut inner = self.inner.borrow_mut();
        if requires_grad && inner.grad.is_none() {
            inner.grad = Some(vec![T::zero(); inner.data.len()]);
        }
        if !requires_grad {
            inner.grad = None;
        }
        inner.requires_grad = requires_grad;
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.borrow().data.clone()
    }

    /// The single value of a rank-0 or length-1 tensor.
    pub fn item(&self) -> Result<T> {
        let inner = self.inner.borrow();
        if inner.data.len() != 1 {
            return Err(TensorError::NotScalar {
                op: "item",
                shape: inner.shape.clone(),
            });
        }
        Ok(inner.data[0])
    }

    /// Copy of the gradient buffer, if one exists.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        if let Some(g) = self.inner.borrow_mut().grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Overwrite the values in place; the shape must stay fixed.
    pub fn set_data(&self, data: &[T]) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if data.len() != inner.data.len() {
            return Err(TensorError::DataLength {
                shape: inner.shape.clone(),
                expected: inner.data.len(),
                got: data.len(),
            });
        }
        inner.data.copy_from_slice(data);
        Ok(())
    }

    /// New storage with the same values and flags; gradients are not copied.
    pub fn deep_clone(&self) -> Self {
        let inner = self.inner.borrow();
        Self::from_vec(inner.shape.clone(), inner.data.clone(), inner.requires_grad)
            .expect("consistent by construction")
    }

    /// Two handles to the same storage?
    pub fn same_storage(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn borrow(&self) -> Ref<'_, Inner<T>> {
        self.inner.borrow()
    }

    pub(crate) fn borrow_mut(&self) -> RefMut<'_, Inner<T>> {
        self.inner.borrow_mut()
    }

    pub(crate) fn accumulate_grad(&self, delta: &[T]) {
        let mut inner = self.inner.borrow_mut();
        if let Some(g) = inner.grad.as_mut() {
            debug_assert_eq!(g.len(), delta.len());
            for (gi, di) in g.iter_mut().zip(delta) {
                *gi += *di;
            }
        }
    }
}
