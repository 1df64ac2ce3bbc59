use super::{same_dims, Tensor};
use crate::error::Result;
use crate::scalar::Scalar;

pub fn add<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    same_dims(x, y, "add")?;
    let data = x.data().iter().zip(y.data()).map(|(&a, &b)| a + b).collect();
    Tensor::from_vec(x.dims(), data)
}

/// Both addends receive the upstream gradient unchanged.
pub fn add_backward<T: Scalar>(grad_out: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    (grad_out.clone(), grad_out.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_addend_and_cancellation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::uniform([1, 2, 3, 3], -1.0, 1.0, &mut rng);
        assert_eq!(add(&x, &Tensor::zeros(x.dims())).unwrap(), x);
        let neg = x.map(|v| -v);
        assert!(add(&x, &neg).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_is_forwarded_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Tensor::<f32>::uniform([2, 2, 2, 2], -1.0, 1.0, &mut rng);
        let (a, b) = add_backward(&g);
        assert_eq!(a.data(), g.data());
        assert_eq!(b.data(), g.data());
    }

    #[test]
    fn mismatched_dims_rejected() {
        let x = Tensor::<f32>::zeros([1, 1, 2, 2]);
        let y = Tensor::<f32>::zeros([1, 2, 2, 2]);
        assert!(add(&x, &y).is_err());
    }
}
