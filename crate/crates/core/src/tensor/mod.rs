//! Dense NCHW tensors and the primitive layer kernels.
//!
//! Every kernel comes as a forward/backward pair written out by hand. Kernels
//! are pure functions of their inputs; the only state that outlives a call is
//! the batch-norm running statistics, which the caller owns.

mod activation;
mod batchnorm;
mod concat;
mod conv;
mod elementwise;
mod linear;
mod pool;

pub use activation::{relu, relu_backward};
pub(crate) use batchnorm::{normalize, normalize_backward};
pub use batchnorm::{
    batch_statistics, batchnorm_backward, batchnorm_forward, batchnorm_forward_with_stats,
    BatchNormGrads, BatchNormParams, BatchStats, Mode,
};
pub use concat::{concat_backward, concat_channels};
pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvParams};
pub use elementwise::{add, add_backward};
pub use linear::{linear_backward, linear_forward, LinearGrads, LinearParams};
pub use pool::{maxpool2, maxpool2_backward, PoolIndices};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense 4-D array in row-major `(N, C, H, W)` order with an optional
/// gradient buffer of the same length.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: [usize; 4],
    data: Vec<T>,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: [usize; 4], value: T) -> Self {
        Tensor {
            dims,
            data: vec![value; dims.iter().product()],
            grad: None,
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::config(format!(
                "tensor of dims {:?} needs {} values, got {}",
                dims,
                expected,
                data.len()
            )));
        }
        Ok(Tensor {
            dims,
            data,
            grad: None,
        })
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(dims: [usize; 4], std: f64, rng: &mut R) -> Self {
        let len = dims.iter().product();
        let data = (0..len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64_lossy(z * std)
            })
            .collect();
        Tensor {
            dims,
            data,
            grad: None,
        }
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(dims: [usize; 4], lo: f64, hi: f64, rng: &mut R) -> Self {
        let len = dims.iter().product();
        let data = (0..len)
            .map(|_| T::from_f64_lossy(rng.random_range(lo..hi)))
            .collect();
        Tensor {
            dims,
            data,
            grad: None,
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cs, hs, ws] = self.dims;
        ((n * cs + c) * hs + h) * ws + w
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    /// Same data viewed under new dims with the same element count.
    pub fn reshape(mut self, dims: [usize; 4]) -> Result<Self> {
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(Error::config(format!(
                "cannot reshape {:?} into {:?}",
                self.dims, dims
            )));
        }
        self.dims = dims;
        Ok(self)
    }

    /// Samples `range` along the batch axis, copied.
    pub fn batch_slice(&self, range: std::ops::Range<usize>) -> Self {
        let per = self.dims[1] * self.dims[2] * self.dims[3];
        Tensor {
            dims: [range.len(), self.dims[1], self.dims[2], self.dims[3]],
            data: self.data[range.start * per..range.end * per].to_vec(),
            grad: None,
        }
    }

    /// Stacks single-sample or multi-sample tensors along the batch axis.
    pub fn stack(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::config("cannot stack an empty list of tensors"))?;
        let tail = [first.dims[1], first.dims[2], first.dims[3]];
        let mut data = Vec::with_capacity(parts.iter().map(|t| t.len()).sum());
        let mut n = 0;
        for t in parts {
            if [t.dims[1], t.dims[2], t.dims[3]] != tail {
                return Err(Error::config(format!(
                    "cannot stack {:?} with {:?}",
                    first.dims, t.dims
                )));
            }
            n += t.dims[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            dims: [n, tail[0], tail[1], tail[2]],
            data,
            grad: None,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
            grad: self.grad.as_ref().map(|g| {
                g.iter()
                    .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                    .collect()
            }),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Allocates a zeroed gradient buffer if none exists.
    pub fn grad_mut(&mut self) -> &mut Vec<T> {
        let len = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); len])
    }

    /// Adds `delta` into the gradient buffer.
    pub fn accumulate_grad(&mut self, delta: &[T]) {
        let grad = self.grad_mut();
        assert_eq!(grad.len(), delta.len(), "gradient length mismatch");
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += *d;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub(crate) fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }
}

pub(crate) fn same_dims<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::config(format!(
            "{what}: dims {:?} and {:?} differ",
            a.dims, b.dims
        )));
    }
    Ok(())
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec([1, 2, 2, 2], vec![0.0; 7]).is_err());
        let t = Tensor::<f32>::from_vec([1, 2, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        assert_eq!(t.at(0, 1, 0, 1), 5.0);
    }

    #[test]
    fn stack_then_slice() {
        let a = Tensor::<f32>::full([1, 2, 2, 2], 1.0);
        let b = Tensor::<f32>::full([2, 2, 2, 2], 2.0);
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.dims(), [3, 2, 2, 2]);
        assert_eq!(s.batch_slice(1..3), b);
    }

    #[test]
    fn accumulate_grad_allocates() {
        let mut t = Tensor::<f64>::zeros([1, 1, 1, 2]);
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[1.0, 2.0]);
        assert_eq!(t.grad.as_deref(), Some(&[2.0, 4.0][..]));
    }
}
