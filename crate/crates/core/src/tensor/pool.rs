use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Flat input index of the winning element of every pooling window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    pub input_dims: [usize; 4],
    pub winners: Vec<usize>,
}

/// 2x2 max pooling with stride 2 and no padding. Ties go to the first
/// element in row-major window order.
pub fn maxpool2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let [n, c, h, w] = x.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::config(format!(
            "2x2 max pooling needs even spatial dims, got {h}x{w}; align the input size to a multiple of 2^stages"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut winners = Vec::with_capacity(out.len());
    let src = x.data();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                for cand in [top + 1, top + w, top + w + 1] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                out.data_mut()[o] = src[best];
                winners.push(best);
                o += 1;
            }
        }
    }
    Ok((
        out,
        PoolIndices {
            input_dims: x.dims(),
            winners,
        },
    ))
}

/// Routes each output gradient to its recorded winner.
pub fn maxpool2_backward<T: Scalar>(idx: &PoolIndices, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.len() != idx.winners.len() {
        return Err(Error::config(format!(
            "max-pool grad_out {:?} does not match {} recorded windows",
            grad_out.dims(),
            idx.winners.len()
        )));
    }
    let mut grad = Tensor::zeros(idx.input_dims);
    for (&i, &g) in idx.winners.iter().zip(grad_out.data()) {
        grad.data_mut()[i] += g;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn picks_maximum_and_records_position() {
        let x = Tensor::<f32>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, idx) = maxpool2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx.winners, vec![x.index(0, 0, 1, 1)]);
    }

    #[test]
    fn ties_route_to_first_element() {
        let x = Tensor::<f32>::full([1, 1, 4, 4], 3.0);
        let (y, idx) = maxpool2(&x).unwrap();
        assert!(y.data().iter().all(|v| *v == 3.0));
        let g = maxpool2_backward(&idx, &Tensor::full(y.dims(), 1.0)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i % 2 == 0 && j % 2 == 0 { 1.0 } else { 0.0 };
                assert_eq!(g.at(0, 0, i, j), expect);
            }
        }
    }

    #[test]
    fn matches_window_oracle_and_conserves_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f32>::uniform([1, 2, 6, 6], -1.0, 1.0, &mut rng);
        let (y, idx) = maxpool2(&x).unwrap();
        for c in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(dy, dx)| x.at(0, c, 2 * oy + dy, 2 * ox + dx))
                        .fold(f32::NEG_INFINITY, f32::max);
                    assert_eq!(y.at(0, c, oy, ox), m);
                }
            }
        }
        let go = Tensor::<f64>::uniform(y.dims(), -1.0, 1.0, &mut rng);
        let g = maxpool2_backward(&idx, &go).unwrap();
        assert!((g.sum() - go.sum()).abs() < 1e-12);
    }

    #[test]
    fn odd_dims_rejected() {
        let x = Tensor::<f32>::zeros([1, 1, 3, 4]);
        assert!(matches!(maxpool2(&x), Err(Error::Config(_))));
    }
}
