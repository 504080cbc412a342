use std::fmt;
use std::sync::Arc;

use crate::{DType, Element, Result, Rng, Shape, TensorError};

/// Initial contents for [`Tensor::new`]. Random fills draw only from the given [`Rng`].
pub enum Fill<'a> {
    Zeros,
    Ones,
    Constant(f64),
    Uniform { rng: &'a mut Rng, lo: f64, hi: f64 },
    TruncNormal { rng: &'a mut Rng, std: f64 },
}

/// Dense row-major tensor.
///
/// The element buffer is shared behind an `Arc`, so clones and reshapes are
/// cheap and never copy. Tensors are immutable once built; only the gradient
/// slot changes, and only during backward.
#[derive(Clone)]
pub struct Tensor<E: Element = f32> {
    shape: Shape,
    data: Arc<Vec<E>>,
    requires_grad: bool,
    grad: Option<Box<Tensor<E>>>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: impl Into<Vec<usize>>, fill: Fill<'_>) -> Result<Self> {
        let shape = Shape::new(shape)?;
        let n = shape.numel();
        let data: Vec<E> = match fill {
            Fill::Zeros => vec![E::zero(); n],
            Fill::Ones => vec![E::one(); n],
            Fill::Constant(c) => vec![E::from_f64(c); n],
            Fill::Uniform { rng, lo, hi } => {
                (0..n).map(|_| E::from_f64(rng.uniform(lo, hi))).collect()
            }
            Fill::TruncNormal { rng, std } => {
                (0..n).map(|_| E::from_f64(rng.trunc_normal(std))).collect()
            }
        };
        Ok(Self::from_parts(shape, data))
    }

    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Self> {
        let shape = Shape::new(shape)?;
        if shape.numel() != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected: shape.numel(),
                got: data.len(),
            });
        }
        Ok(Self::from_parts(shape, data))
    }

    pub fn from_f64_slice(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| E::from_f64(v)).collect())
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, Fill::Zeros)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, Fill::Ones)
    }

    pub fn scalar(v: E) -> Self {
        Self::from_parts(Shape::scalar(), vec![v])
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<E>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn ndim(&self) -> usize {
        self.shape.ndim()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        E::DTYPE
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.data.to_vec()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v.to_f64()).collect()
    }

    /// True when both tensors view the same element buffer.
    pub fn shares_storage(&self, other: &Tensor<E>) -> bool {
        Arc::ptr_eq(&self.data, &other.data)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn grad(&self) -> Option<&Tensor<E>> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient slot, creating it on first use.
    pub fn accumulate_grad(&mut self, g: &Tensor<E>) -> Result<()> {
        if g.dims() != self.dims() {
            return Err(TensorError::shape(
                "accumulate_grad",
                format!("grad {:?} vs tensor {:?}", g.dims(), self.dims()),
            ));
        }
        match &mut self.grad {
            Some(existing) => {
                let buf = Arc::make_mut(&mut existing.data);
                for (a, &b) in buf.iter_mut().zip(g.data.iter()) {
                    *a += b;
                }
            }
            None => {
                self.grad = Some(Box::new(Tensor::from_parts(
                    g.shape.clone(),
                    g.data.to_vec(),
                )))
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// View with new extents over the same buffer. Never copies.
    pub fn reshape(&self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.numel() {
            return Err(TensorError::shape(
                "reshape",
                format!("{:?} -> {:?}", self.dims(), shape.dims()),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
            requires_grad: self.requires_grad,
            grad: None,
        })
    }

    /// Copy with one element replaced; used for finite-difference perturbation.
    pub fn with_element(&self, index: usize, value: E) -> Self {
        let mut data = self.data.to_vec();
        data[index] = value;
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// Elementwise map into a fresh tensor of the same shape.
    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| F::from_f64(v.to_f64())).collect(),
        )
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> E {
        assert_eq!(index.len(), self.ndim(), "index rank");
        let strides = self.shape.strides();
        let flat: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[flat]
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "item() on tensor of shape {:?}",
                self.dims()
            )));
        }
        Ok(self.data[0])
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<E>) -> f64 {
        assert_eq!(self.dims(), other.dims(), "max_abs_diff shape");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Bit-exact equality of shape and contents.
    pub fn bit_eq(&self, other: &Tensor<E>) -> bool {
        self.dims() == other.dims()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(&a, &b)| a.to_f64().to_bits() == b.to_f64().to_bits())
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<E> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("dtype", &E::DTYPE)
            .field("requires_grad", &self.requires_grad)
            .field("data", &preview)
            .finish()
    }
}
