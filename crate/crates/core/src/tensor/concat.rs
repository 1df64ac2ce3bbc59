use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Stacks tensors along the channel axis, in the given order.
pub fn concat_channels<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::config("concat of an empty tensor list"))?;
    let [n, _, h, w] = first.dims();
    for (i, t) in xs.iter().enumerate().skip(1) {
        let [tn, _, th, tw] = t.dims();
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::config(format!(
                "concat input 0 {:?} and input {i} {:?} disagree on N/H/W",
                first.dims(),
                t.dims()
            )));
        }
    }
    let total: usize = xs.iter().map(|t| t.channels()).sum();
    let hw = h * w;
    let mut data = Vec::with_capacity(n * total * hw);
    for b in 0..n {
        for t in xs {
            let per = t.channels() * hw;
            data.extend_from_slice(&t.data()[b * per..(b + 1) * per]);
        }
    }
    Tensor::from_vec([n, total, h, w], data)
}

/// Splits a channel-concatenated gradient back into pieces of `channels`.
pub fn concat_backward<T: Scalar>(grad_out: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    let [n, c, h, w] = grad_out.dims();
    if channels.iter().sum::<usize>() != c {
        return Err(Error::config(format!(
            "cannot split {c} channels into {channels:?}"
        )));
    }
    let hw = h * w;
    let mut parts: Vec<Vec<T>> = channels
        .iter()
        .map(|&ch| Vec::with_capacity(n * ch * hw))
        .collect();
    for b in 0..n {
        let mut offset = b * c * hw;
        for (part, &ch) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&grad_out.data()[offset..offset + ch * hw]);
            offset += ch * hw;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(d, &ch)| Tensor::from_vec([n, ch, h, w], d))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_input_is_identity() {
        let x = Tensor::<f32>::from_vec([1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(concat_channels(&[&x]).unwrap(), x);
    }

    #[test]
    fn first_input_occupies_leading_channels() {
        let a = Tensor::<f32>::full([1, 2, 2, 2], 1.0);
        let b = Tensor::<f32>::full([1, 2, 2, 2], 2.0);
        let y = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(y.dims(), [1, 4, 2, 2]);
        for c in 0..4 {
            assert_eq!(y.at(0, c, 1, 1), if c < 2 { 1.0 } else { 2.0 });
        }
    }

    #[test]
    fn spatial_mismatch_names_the_pair() {
        let a = Tensor::<f32>::zeros([1, 1, 2, 2]);
        let b = Tensor::<f32>::zeros([1, 1, 4, 4]);
        let err = concat_channels(&[&a, &b]).unwrap_err().to_string();
        assert!(err.contains("[1, 1, 2, 2]") && err.contains("[1, 1, 4, 4]"));
    }

    proptest! {
        #[test]
        fn split_then_concat_round_trips(
            n in 1usize..3,
            chans in proptest::collection::vec(1usize..4, 1..4),
            h in 1usize..4,
            w in 1usize..4,
            seed in any::<u64>(),
        ) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let total = chans.iter().sum();
            let x = Tensor::<f32>::uniform([n, total, h, w], -1.0, 1.0, &mut rng);
            let parts = concat_backward(&x, &chans).unwrap();
            let refs: Vec<&Tensor<f32>> = parts.iter().collect();
            prop_assert_eq!(concat_channels(&refs).unwrap(), x);
        }
    }
}
