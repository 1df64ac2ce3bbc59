use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Fully connected layer over per-sample flattened features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<T> {
    /// `(outputs, inputs, 1, 1)`.
    pub weight: Tensor<T>,
    /// `(outputs, 1, 1, 1)`.
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct LinearGrads<T> {
    pub x: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> LinearParams<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        LinearParams {
            weight: Tensor::zeros([outputs, inputs, 1, 1]),
            bias: Tensor::zeros([outputs, 1, 1, 1]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.dims()[0]
    }

    fn check(&self, x: &Tensor<T>) -> Result<usize> {
        let features = x.len() / x.batch().max(1);
        if features != self.inputs() {
            return Err(Error::config(format!(
                "linear layer expects {} features per sample, input {:?} has {}",
                self.inputs(),
                x.dims(),
                features
            )));
        }
        if self.bias.len() != self.outputs() {
            return Err(Error::config(format!(
                "linear bias {:?} does not match weight {:?}",
                self.bias.dims(),
                self.weight.dims()
            )));
        }
        Ok(features)
    }
}

/// `logits[n, i] = sum_j W[i, j] * x[n, j] + b[i]`, returned as `(N, outputs, 1, 1)`.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, p: &LinearParams<T>) -> Result<Tensor<T>> {
    let d = p.check(x)?;
    let (n, k) = (x.batch(), p.outputs());
    let mut out = Tensor::zeros([n, k, 1, 1]);
    for row in out.data_mut().chunks_mut(k) {
        row.copy_from_slice(p.bias.data());
    }
    // out (n x k) += x (n x d) * W^T (d x k)
    T::gemm(
        n,
        d,
        k,
        T::one(),
        x.data(),
        (d as isize, 1),
        p.weight.data(),
        (1, d as isize),
        T::one(),
        out.data_mut(),
        (k as isize, 1),
    );
    Ok(out)
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &LinearParams<T>,
    grad_out: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let d = p.check(x)?;
    let (n, k) = (x.batch(), p.outputs());
    if grad_out.len() != n * k {
        return Err(Error::config(format!(
            "linear grad_out {:?} does not match ({n}, {k})",
            grad_out.dims()
        )));
    }
    let mut grad_x = Tensor::zeros(x.dims());
    // dx (n x d) = dY (n x k) * W (k x d)
    T::gemm(
        n,
        k,
        d,
        T::one(),
        grad_out.data(),
        (k as isize, 1),
        p.weight.data(),
        (d as isize, 1),
        T::zero(),
        grad_x.data_mut(),
        (d as isize, 1),
    );
    let mut grad_w = Tensor::zeros(p.weight.dims());
    // dW (k x d) = dY^T (k x n) * x (n x d)
    T::gemm(
        k,
        n,
        d,
        T::one(),
        grad_out.data(),
        (1, k as isize),
        x.data(),
        (d as isize, 1),
        T::zero(),
        grad_w.data_mut(),
        (d as isize, 1),
    );
    let mut grad_b = vec![T::zero(); k];
    for row in grad_out.data().chunks(k) {
        for (gb, &g) in grad_b.iter_mut().zip(row) {
            *gb += g;
        }
    }
    Ok(LinearGrads {
        x: grad_x,
        weight: grad_w,
        bias: grad_b,
    })
}
