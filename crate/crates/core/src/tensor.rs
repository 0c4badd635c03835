//! Dense row-major tensors.

use std::fmt;
use std::sync::Arc;

use crate::error::dim_err;
use crate::{Real, Result};

/// Dense N-dimensional array.
///
/// The value buffer is shared copy-on-write, so handing a tensor to a tape
/// is cheap. `grad` is only ever populated for parameters.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<Real>>,
    requires_grad: bool,
    grad: Option<Vec<Real>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<Real>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(dim_err(format!(
                "shape {shape:?} must be non-empty with positive dimensions"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err(format!(
                "shape {shape:?} holds {n} elements but {} values were given",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
        })
    }

    pub(crate) fn from_shared(shape: Vec<usize>, data: Arc<Vec<Real>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: Real) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("positive shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn scalar(value: Real) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> Real) -> Self {
        let n = shape.iter().product();
        Self::new(shape, (0..n).map(&mut f).collect()).expect("positive shape")
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub(crate) fn shared(&self) -> &Arc<Vec<Real>> {
        &self.data
    }

    /// Mutable access to the values; copies first if the buffer is shared.
    pub fn data_mut(&mut self) -> &mut [Real] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[Real]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[Real]) {
        debug_assert_eq!(g.len(), self.len());
        match self.grad.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += *b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// Same values under a different shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.len() || shape.contains(&0) {
            return Err(dim_err(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self::from_shared(shape.to_vec(), self.data.clone()))
    }

    /// Single element of a one-element tensor.
    pub fn item(&self) -> Real {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| dim_err("cannot stack an empty list"))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape() != first.shape() {
                return Err(dim_err(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape(),
                    first.shape()
                )));
            }
            data.extend_from_slice(t.data());
        }
        Tensor::new(&shape, data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Real {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Real::max)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}
