//! Dense row-major tensors.

mod scalar;

pub use scalar::Scalar;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Dense N-dimensional array stored in row-major order.
///
/// Every dimension is at least 1 and `data.len()` equals the product of
/// `shape`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_dims(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("tensor must have at least one dimension"));
    }
    if let Some(pos) = shape.iter().position(|&d| d == 0) {
        return Err(Error::shape(format!(
            "dimension {pos} of {shape:?} is zero"
        )));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel = check_dims(shape)?;
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Panics on an invalid shape; for internally computed shapes.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let numel = check_dims(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn zeros_like(other: &Tensor<T>) -> Self {
        Tensor {
            shape: other.shape.clone(),
            data: vec![T::zero(); other.data.len()],
        }
    }

    /// Samples from `N(0, std^2)`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Result<Self> {
        let numel = check_dims(shape)?;
        let data = (0..numel)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64(z * std)
            })
            .collect();
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Samples uniformly from `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Result<Self> {
        let numel = check_dims(shape)?;
        let data = (0..numel)
            .map(|_| T::from_f64(rng.random_range(lo..hi)))
            .collect();
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let numel = check_dims(shape)?;
        if numel != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    /// Removes axis `axis`, which must have extent 1.
    pub fn squeeze_axis(self, axis: usize) -> Result<Self> {
        if axis >= self.shape.len() || self.shape[axis] != 1 || self.shape.len() == 1 {
            return Err(Error::shape(format!(
                "cannot squeeze axis {axis} of {:?}",
                self.shape
            )));
        }
        let mut shape = self.shape;
        shape.remove(axis);
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    /// Inserts a unit axis at `axis`.
    pub fn unsqueeze_axis(self, axis: usize) -> Result<Self> {
        if axis > self.shape.len() {
            return Err(Error::shape(format!(
                "cannot unsqueeze axis {axis} of {:?}",
                self.shape
            )));
        }
        let mut shape = self.shape;
        shape.insert(axis, 1);
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sum_of_squares(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "axpy shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
                acc * d + i
            })
    }

    /// The `i`-th slice along axis 0, as a tensor with that axis dropped
    /// (or kept with extent 1 if the tensor is one-dimensional).
    pub fn index_axis0(&self, i: usize) -> Tensor<T> {
        let inner: usize = self.shape[1..].iter().product();
        let shape = if self.shape.len() > 1 {
            self.shape[1..].to_vec()
        } else {
            vec![1]
        };
        Tensor {
            shape,
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("cannot stack zero tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape(format!(
                    "stack shape mismatch {:?} vs {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }
}

/// Shape-checks that `t` has exactly `rank` dimensions, naming `what` on failure.
pub(crate) fn expect_rank<T: Scalar>(t: &Tensor<T>, rank: usize, what: &str) -> Result<()> {
    if t.ndim() != rank {
        return Err(Error::shape(format!(
            "{what} must be {rank}-dimensional, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}
