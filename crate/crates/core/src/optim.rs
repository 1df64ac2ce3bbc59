//! Softmax, cross-entropy, SGD with momentum and weight decay, and the
//! step-halving learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{ParamKind, ParameterSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Numerically stable softmax of one logit row.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Mean cross-entropy over a batch and its gradient with respect to the logits.
#[derive(Clone, Debug)]
pub struct LossValue<T> {
    pub value: T,
    pub grad_logits: Tensor<T>,
}

/// `-(1/N) sum_n log softmax(logits_n)[label_n]`, with gradient `(q - onehot) / N`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<LossValue<T>> {
    let n = logits.batch();
    if n == 0 {
        return Err(Error::input("cross-entropy over an empty batch"));
    }
    if labels.len() != n {
        return Err(Error::input(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    let classes = logits.len() / n;
    let scale = T::one() / T::from_usize(n).unwrap();
    let mut grad = Vec::with_capacity(logits.len());
    let mut total = T::zero();
    for (i, (row, &label)) in logits.data().chunks(classes).zip(labels).enumerate() {
        if label >= classes {
            return Err(Error::input(format!(
                "sample {i} has label {label} outside [0, {classes})"
            )));
        }
        let max = row
            .iter()
            .copied()
            .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
        let log_norm = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
        total += log_norm - row[label];
        for (j, &z) in row.iter().enumerate() {
            let q = (z - log_norm).exp();
            let target = if j == label { T::one() } else { T::zero() };
            grad.push((q - target) * scale);
        }
    }
    Ok(LossValue {
        value: total * scale,
        grad_logits: Tensor::from_vec(logits.dims(), grad)?,
    })
}

/// `initial_lr * 0.5^floor(iteration / halving_period)`.
pub fn lr_schedule(initial_lr: f64, iteration: u64, halving_period: u64) -> f64 {
    let halvings = iteration / halving_period.max(1);
    initial_lr * 0.5f64.powi(halvings.min(i32::MAX as u64) as i32)
}

/// Classical (non-Nesterov) momentum SGD state.
#[derive(Clone, Debug)]
pub struct SgdState<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: BTreeMap<String, Vec<T>>,
    pub iteration: u64,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::config(format!(
                "weight decay must be non-negative, got {weight_decay}"
            )));
        }
        Ok(SgdState {
            lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
            iteration: 0,
        })
    }
}

/// One update of every trainable tensor from its gradient buffer:
/// `g' = g + wd * theta` (weights only), `v = mu * v + g'`, `theta -= lr * v`.
pub fn sgd_step<T: Scalar>(params: &mut dyn ParameterSet<T>, state: &mut SgdState<T>) -> Result<()> {
    let lr = T::from_f64_lossy(state.lr);
    let mu = T::from_f64_lossy(state.momentum);
    let wd = T::from_f64_lossy(state.weight_decay);
    let mut failure = None;
    params.visit_mut(&mut |name, tensor| {
        if failure.is_some() {
            return;
        }
        let kind = ParamKind::of(name);
        if !kind.is_trainable() {
            return;
        }
        let len = tensor.len();
        let Some(grad) = tensor.grad.take() else {
            failure = Some(Error::config(format!("no gradient for parameter {name}")));
            return;
        };
        if grad.len() != len {
            failure = Some(Error::config(format!(
                "gradient for {name} has {} entries, parameter has {len}",
                grad.len()
            )));
            tensor.grad = Some(grad);
            return;
        }
        let velocity = state
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![T::zero(); len]);
        if velocity.len() != len {
            failure = Some(Error::config(format!(
                "velocity for {name} has {} entries, parameter has {len}",
                velocity.len()
            )));
            tensor.grad = Some(grad);
            return;
        }
        let decay = kind == ParamKind::Weight;
        for ((theta, v), &g) in tensor.data_mut().iter_mut().zip(velocity.iter_mut()).zip(&grad) {
            let g = if decay { g + wd * *theta } else { g };
            *v = mu * *v + g;
            *theta -= lr * *v;
        }
        tensor.grad = Some(grad);
    });
    if let Some(e) = failure {
        return Err(e);
    }
    state.iteration += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Parameters;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_symmetric_and_stable() {
        assert_eq!(softmax(&[0.0f32, 0.0]), vec![0.5, 0.5]);
        let q = softmax(&[1000.0f32, 0.0]);
        assert!((q[0] - 1.0).abs() < 1e-7 && q[1] >= 0.0 && q[1] < 1e-30);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let direct: Vec<f64> = {
            let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        };
        for (a, b) in softmax(&[1.0f32, 2.0, 3.0]).iter().zip(&direct) {
            assert!((*a as f64 - b).abs() <= 1e-7);
        }
        for (a, b) in softmax(&[1.0f64, 2.0, 3.0]).iter().zip(&direct) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let logits = Tensor::<f64>::from_vec([1, 3, 1, 1], vec![0.0, 800.0, 0.0]).unwrap();
        let loss = cross_entropy(&logits, &[1]).unwrap();
        assert_eq!(loss.value, 0.0);
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = Tensor::<f32>::full([3, 5, 1, 1], 0.7);
        let loss = cross_entropy(&logits, &[0, 2, 4]).unwrap();
        assert!((loss.value as f64 - 5f64.ln()).abs() < 1e-6);
        assert!((loss.value - 1.6094).abs() < 1e-4);
    }

    #[test]
    fn label_out_of_range_names_sample() {
        let logits = Tensor::<f32>::zeros([2, 3, 1, 1]);
        let err = cross_entropy(&logits, &[0, 3]).unwrap_err();
        assert!(matches!(&err, Error::Input(m) if m.contains("sample 1")));
    }

    #[test]
    fn gradient_matches_finite_differences_and_rows_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits = Tensor::<f64>::uniform([4, 5, 1, 1], -2.0, 2.0, &mut rng);
        let labels = [0, 3, 4, 1];
        let loss = cross_entropy(&logits, &labels).unwrap();
        for row in loss.grad_logits.data().chunks(5) {
            assert!(row.iter().sum::<f64>().abs() < 1e-6);
        }
        let mut probe = logits.clone();
        for i in 0..logits.len() {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + 1e-5;
            let up = cross_entropy(&probe, &labels).unwrap().value;
            probe.data_mut()[i] = orig - 1e-5;
            let down = cross_entropy(&probe, &labels).unwrap().value;
            probe.data_mut()[i] = orig;
            let num = (up - down) / 2e-5;
            let ana = loss.grad_logits.data()[i];
            assert!((num - ana).abs() <= 1e-3 * num.abs().max(ana.abs()).max(1e-6));
        }
    }

    #[test]
    fn loss_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = Tensor::<f32>::uniform([2, 4, 1, 1], -3.0, 3.0, &mut rng);
        let shifted = logits.map(|v| v + 7.5);
        let a = cross_entropy(&logits, &[1, 2]).unwrap().value;
        let b = cross_entropy(&shifted, &[1, 2]).unwrap().value;
        assert!((a - b).abs() < 1e-6);
    }

    fn single(theta: f64, grad: f64) -> Parameters<f64> {
        let mut p = Parameters::new();
        let mut t = Tensor::full([1, 1, 1, 1], theta);
        t.grad = Some(vec![grad]);
        p.insert("layer.weight", t).unwrap();
        p
    }

    #[test]
    fn vanilla_step() {
        let mut p = single(1.0, 1.0);
        let mut s = SgdState::new(0.1, 0.0, 0.0).unwrap();
        sgd_step(&mut p, &mut s).unwrap();
        assert!((p.get("layer.weight").unwrap().data()[0] - 0.9).abs() < 1e-12);
        assert_eq!(s.iteration, 1);
    }

    #[test]
    fn zero_gradient_coasts_on_velocity() {
        let mut p = single(1.0, 1.0);
        let mut s = SgdState::new(0.1, 0.9, 0.0).unwrap();
        sgd_step(&mut p, &mut s).unwrap();
        p.get_mut("layer.weight").unwrap().grad = Some(vec![0.0]);
        let before = p.get("layer.weight").unwrap().data()[0];
        let v = s.velocity["layer.weight"][0];
        sgd_step(&mut p, &mut s).unwrap();
        let after = p.get("layer.weight").unwrap().data()[0];
        assert!((after - (before - 0.1 * 0.9 * v)).abs() < 1e-12);
    }

    #[test]
    fn three_momentum_steps_follow_unrolled_recurrence() {
        let (lr, mu, wd, g) = (0.01, 0.9, 1e-4, 0.5);
        // hand-unrolled: v1 = g1, v2 = mu v1 + g2, v3 = mu v2 + g3, gi = g + wd theta_{i-1}
        let t0 = 1.0f64;
        let v1 = g + wd * t0;
        let t1 = t0 - lr * v1;
        let v2 = mu * v1 + g + wd * t1;
        let t2 = t1 - lr * v2;
        let v3 = mu * v2 + g + wd * t2;
        let t3 = t2 - lr * v3;

        let mut p = single(t0, g);
        let mut s = SgdState::new(lr, mu, wd).unwrap();
        for _ in 0..3 {
            p.get_mut("layer.weight").unwrap().grad = Some(vec![g]);
            sgd_step(&mut p, &mut s).unwrap();
        }
        assert!((p.get("layer.weight").unwrap().data()[0] - t3).abs() < 1e-7);

        let mut p32 = Parameters::<f32>::new();
        p32.insert("layer.weight", Tensor::full([1, 1, 1, 1], 1.0)).unwrap();
        let mut s32 = SgdState::new(lr, mu, wd).unwrap();
        for _ in 0..3 {
            p32.get_mut("layer.weight").unwrap().grad = Some(vec![g as f32]);
            sgd_step(&mut p32, &mut s32).unwrap();
        }
        assert!((p32.get("layer.weight").unwrap().data()[0] as f64 - t3).abs() < 1e-6);
    }

    #[test]
    fn decay_skips_norm_parameters_and_biases() {
        let mut p = Parameters::<f64>::new();
        for name in ["a.bias", "a.bn.gamma", "a.bn.beta"] {
            let mut t = Tensor::full([1, 1, 1, 1], 2.0);
            t.grad = Some(vec![0.0]);
            p.insert(name, t).unwrap();
        }
        p.insert("a.bn.running_var", Tensor::full([1, 1, 1, 1], 3.0)).unwrap();
        let mut s = SgdState::new(0.1, 0.0, 0.5).unwrap();
        sgd_step(&mut p, &mut s).unwrap();
        assert!(p.iter().all(|(n, t)| t.data()[0] == if n.ends_with("running_var") { 3.0 } else { 2.0 }));
    }

    #[test]
    fn missing_gradient_is_configuration_error() {
        let mut p = Parameters::<f32>::new();
        p.insert("x.weight", Tensor::zeros([1, 1, 1, 2])).unwrap();
        let mut s = SgdState::new(0.1, 0.0, 0.0).unwrap();
        assert!(matches!(sgd_step(&mut p, &mut s), Err(Error::Config(_))));
        p.get_mut("x.weight").unwrap().grad = Some(vec![0.0; 3]);
        assert!(matches!(sgd_step(&mut p, &mut s), Err(Error::Config(_))));
    }

    #[test]
    fn schedule_halves_on_period() {
        assert_eq!(lr_schedule(1e-2, 0, 100_000), 1e-2);
        assert_eq!(lr_schedule(1e-2, 99_999, 100_000), 1e-2);
        assert_eq!(lr_schedule(1e-2, 100_000, 100_000), 5e-3);
        assert_eq!(lr_schedule(1e-2, 200_000, 100_000), 2.5e-3);
        assert!((lr_schedule(1e-2, 350_000, 100_000) - 1.25e-3).abs() < 1e-18);
    }

    proptest::proptest! {
        #[test]
        fn schedule_is_non_increasing(a in 0u64..2_000_000, b in 0u64..2_000_000, period in 1u64..200_000) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            proptest::prop_assert!(lr_schedule(1e-2, hi, period) <= lr_schedule(1e-2, lo, period));
        }

        #[test]
        fn softmax_is_a_distribution_preserving_argmax(z in proptest::collection::vec(-50.0f32..50.0, 2..12)) {
            let q = softmax(&z);
            let s: f32 = q.iter().sum();
            proptest::prop_assert!((s - 1.0).abs() < 1e-6);
            proptest::prop_assert!(q.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }
}
