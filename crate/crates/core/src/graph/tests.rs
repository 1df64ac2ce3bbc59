use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::optim::{cross_entropy, softmax};
use crate::tensor::{
    batchnorm_forward_with_stats, conv2d_forward, maxpool2, relu, BatchNormParams, ConvParams,
    Mode, Tensor,
};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randomize<T: crate::Scalar, L: Layer<T>>(layer: &mut L, seed: u64) {
    let mut r = rng(seed);
    layer.visit_mut("x", &mut |name, t| match ParamKind::of(name) {
        ParamKind::Weight | ParamKind::Bias => *t = Tensor::uniform(t.dims(), -0.5, 0.5, &mut r),
        ParamKind::Norm if name.ends_with("gamma") => *t = Tensor::uniform(t.dims(), 0.5, 1.5, &mut r),
        ParamKind::Norm => *t = Tensor::uniform(t.dims(), -0.2, 0.2, &mut r),
        ParamKind::Buffer => {}
    });
}

/// Central differences of `loss` over every trainable tensor of `layer`,
/// compared against the accumulated analytic gradients.
fn check_layer_gradients<L: Layer<f64> + Clone>(layer: &L, x: &Tensor<f64>, seed: u64) {
    let (y, _) = layer.forward(x, Mode::Training).unwrap();
    let weights = Tensor::<f64>::uniform(y.dims(), -1.0, 1.0, &mut rng(seed)).into_data();
    let loss = |l: &L, x: &Tensor<f64>| -> f64 {
        let (y, _) = l.forward(x, Mode::Training).unwrap();
        y.data().iter().zip(&weights).map(|(a, b)| a * b).sum()
    };
    let mut analytic = layer.clone();
    let (_, cache) = analytic.forward(x, Mode::Training).unwrap();
    let gx = analytic
        .backward(&cache, &Tensor::from_vec(y.dims(), weights.clone()).unwrap())
        .unwrap();

    let step = 1e-6;
    let close = |a: f64, n: f64, what: &str| {
        let diff = (a - n).abs();
        assert!(
            diff <= 1e-4 || diff <= 1e-2 * a.abs().max(n.abs()),
            "{what}: analytic {a} vs numeric {n}"
        );
    };
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = loss(layer, &probe);
        probe.data_mut()[i] = orig - step;
        let down = loss(layer, &probe);
        probe.data_mut()[i] = orig;
        close(gx.data()[i], (up - down) / (2.0 * step), &format!("input[{i}]"));
    }
    let mut names = Vec::new();
    analytic.visit("x", &mut |name, t| {
        if ParamKind::of(name).is_trainable() {
            names.push((name.to_string(), t.grad.clone().expect("gradient accumulated")));
        }
    });
    for (name, grad) in names {
        for (i, &g) in grad.iter().enumerate() {
            let eval = |delta: f64| {
                let mut l = layer.clone();
                l.visit_mut("x", &mut |n, t| {
                    if n == name {
                        t.data_mut()[i] += delta;
                    }
                });
                loss(&l, x)
            };
            close(g, (eval(step) - eval(-step)) / (2.0 * step), &format!("{name}[{i}]"));
        }
    }
}

#[test]
fn build_is_deterministic_per_seed() {
    let cfg = NetworkConfig::desk64(3).unwrap();
    let a = build_network::<f32>(&cfg, 7).unwrap();
    let b = build_network::<f32>(&cfg, 7).unwrap();
    assert_eq!(a, b);
    let c = build_network::<f32>(&cfg, 8).unwrap();
    assert_ne!(a, c);
}

#[test]
fn head_width_matches_feature_layout() {
    let cfg = NetworkConfig::desk64(3).unwrap();
    let p = build_network::<f32>(&cfg, 1).unwrap();
    assert_eq!(p.get("head.weight").unwrap().dims(), [3, 192 * 4 * 4, 1, 1]);
}

#[test]
fn initialization_conventions() {
    let cfg = NetworkConfig::desk64(3).unwrap();
    let p = build_network::<f64>(&cfg, 3).unwrap();
    for (name, t) in p.iter() {
        match name.rsplit('.').next().unwrap() {
            "gamma" | "running_var" => assert!(t.data().iter().all(|v| *v == 1.0), "{name}"),
            "beta" | "bias" | "running_mean" => assert!(t.data().iter().all(|v| *v == 0.0), "{name}"),
            _ => {}
        }
    }
    let w = p.get("stage4.plain.conv2.weight").unwrap();
    let var = w.data().iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
    let expected = 2.0 / (64.0 * 9.0);
    assert!((var / expected - 1.0).abs() < 0.05, "{var} vs {expected}");
}

#[test]
fn plain_blocks_halve_and_match_kernel_chain() {
    let mut r = rng(4);
    for layers in [2, 3] {
        let mut block = PlainBlock::<f32>::new(3, 5, layers);
        randomize(&mut block, 10 + layers as u64);
        let x = Tensor::<f32>::uniform([1, 3, 8, 8], -1.0, 1.0, &mut r);
        let (y, _) = block.forward(&x, Mode::Training).unwrap();
        assert_eq!(y.dims(), [1, 5, 4, 4]);
        let mut h = x.clone();
        for c in &block.convs {
            h = relu(&conv2d_forward(&h, c).unwrap());
        }
        let (oracle, _) = maxpool2(&h).unwrap();
        for (a, b) in y.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() <= 1e-5);
        }
    }
}

#[test]
fn plain_block_maps_zero_to_zero() {
    let mut block = PlainBlock::<f32>::new(2, 4, 2);
    randomize(&mut block, 1);
    for c in block.convs.iter_mut() {
        c.bias.as_mut().unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let (y, _) = block.forward(&Tensor::zeros([1, 2, 8, 8]), Mode::Training).unwrap();
    assert!(y.data().iter().all(|v| *v == 0.0));
}

#[test]
fn plain_block_rejects_odd_input() {
    let block = PlainBlock::<f32>::new(1, 1, 2);
    assert!(block.forward(&Tensor::zeros([1, 1, 7, 8]), Mode::Training).is_err());
}

#[test]
fn plain_block_gradients() {
    let mut block = PlainBlock::<f64>::new(2, 3, 3);
    randomize(&mut block, 5);
    let x = Tensor::uniform([1, 2, 6, 6], -1.0, 1.0, &mut rng(6));
    check_layer_gradients(&block, &x, 7);
}

#[test]
fn zeroed_residual_unit_is_identity() {
    let unit = ResidualUnit::<f32>::new(3);
    let x = Tensor::<f32>::uniform([2, 3, 8, 8], -1.0, 1.0, &mut rng(1));
    for mode in [Mode::Training, Mode::Inference] {
        let (y, _) = unit.forward(&x, mode).unwrap();
        assert_eq!(y, x);
    }
    let block = ResidualBlock::<f32>::small(3);
    let (y, _) = block.forward(&x, Mode::Training).unwrap();
    assert_eq!(y, x);
}

#[test]
fn zeroed_residual_skip_passes_gradient_exactly() {
    let mut block = ResidualBlock::<f32>::small(2);
    let x = Tensor::<f32>::uniform([1, 2, 8, 8], -1.0, 1.0, &mut rng(2));
    let (y, cache) = block.forward(&x, Mode::Training).unwrap();
    assert_eq!(y.dims(), [1, 2, 8, 8]);
    let g = Tensor::<f32>::uniform(y.dims(), -1.0, 1.0, &mut rng(3));
    let gx = block.backward(&cache, &g).unwrap();
    assert_eq!(gx, g);
}

#[test]
fn small_residual_requires_matching_widths() {
    let mut cfg = NetworkConfig::desk64(3).unwrap();
    cfg.stages[1].residual = BlockSpec::new(BlockKind::ResidualSmall, 8, 16);
    let err = Network::<f32>::new(&cfg, 0).unwrap_err();
    assert!(err.to_string().contains("identity skip"), "{err}");
}

#[test]
fn residual_unit_gradients() {
    let mut unit = ResidualUnit::<f64>::new(2);
    randomize(&mut unit, 8);
    let x = Tensor::uniform([2, 2, 4, 4], -1.0, 1.0, &mut rng(9));
    check_layer_gradients(&unit, &x, 10);
}

#[test]
fn large_residual_halves_like_plain() {
    let mut block = ResidualBlock::<f32>::large(2, 4);
    randomize(&mut block, 11);
    let x = Tensor::<f32>::uniform([1, 2, 8, 8], -1.0, 1.0, &mut rng(12));
    let (y, _) = block.forward(&x, Mode::Training).unwrap();
    assert_eq!(y.dims(), [1, 4, 4, 4]);
    let (p, _) = PlainBlock::<f32>::new(2, 4, 3).forward(&x, Mode::Training).unwrap();
    assert_eq!(p.dims(), y.dims());
}

#[test]
fn large_residual_gradients() {
    let mut block = ResidualBlock::<f64>::large(2, 2);
    randomize(&mut block, 13);
    let x = Tensor::uniform([1, 2, 8, 8], -1.0, 1.0, &mut rng(14));
    check_layer_gradients(&block, &x, 15);
}

#[test]
fn dense_block_channel_counts() {
    for (stem, layers, growth) in [(4, 1, 3), (2, 3, 2), (5, 4, 1), (3, 2, 6)] {
        let block = DenseBlock::<f32>::new(stem, layers, growth);
        let x = Tensor::<f32>::uniform([2, stem, 4, 4], -1.0, 1.0, &mut rng(1));
        let (y, _) = block.forward(&x, Mode::Training).unwrap();
        assert_eq!(y.channels(), stem + layers * growth);
        assert_eq!(block.output_channels(stem), stem + layers * growth);
    }
}

#[test]
fn zeroed_dense_block_appends_zeros() {
    let block = DenseBlock::<f32>::new(3, 2, 2);
    let x = Tensor::<f32>::uniform([1, 3, 4, 4], -1.0, 1.0, &mut rng(2));
    let (y, _) = block.forward(&x, Mode::Training).unwrap();
    for c in 0..7 {
        for i in 0..4 {
            for j in 0..4 {
                let expect = if c < 3 { x.at(0, c, i, j) } else { 0.0 };
                assert_eq!(y.at(0, c, i, j), expect);
            }
        }
    }
}

#[test]
fn dense_block_matches_unrolled_composition() {
    let mut block = DenseBlock::<f32>::new(2, 3, 2);
    randomize(&mut block, 3);
    let x = Tensor::<f32>::uniform([2, 2, 4, 4], -1.0, 1.0, &mut rng(4));
    let (y, _) = block.forward(&x, Mode::Training).unwrap();

    let m = |l: &ConvBn<f32>, input: &Tensor<f32>| {
        let c = conv2d_forward(input, &l.conv).unwrap();
        relu(&batchnorm_forward_with_stats(&c, &l.bn).unwrap().0)
    };
    let y1 = m(&block.layers[0], &x);
    let in2 = crate::tensor::concat_channels(&[&x, &y1]).unwrap();
    let y2 = m(&block.layers[1], &in2);
    let in3 = crate::tensor::concat_channels(&[&x, &y1, &y2]).unwrap();
    let y3 = m(&block.layers[2], &in3);
    let oracle = crate::tensor::concat_channels(&[&x, &y1, &y2, &y3]).unwrap();
    assert_eq!(y.dims(), oracle.dims());
    for (a, b) in y.data().iter().zip(oracle.data()) {
        assert!((a - b).abs() <= 1e-5);
    }
}

#[test]
fn dense_block_gradients() {
    let mut block = DenseBlock::<f64>::new(2, 2, 2);
    randomize(&mut block, 16);
    let x = Tensor::uniform([2, 2, 4, 4], -1.0, 1.0, &mut rng(17));
    check_layer_gradients(&block, &x, 18);
}

#[test]
fn compression_identity_kernel() {
    let mut comp = ConvBn::<f32>::new(3, 3, 1, 1, true);
    for c in 0..3 {
        let i = comp.conv.weight.index(c, c, 0, 0);
        comp.conv.weight.data_mut()[i] = 1.0;
    }
    let x = Tensor::<f32>::uniform([2, 3, 4, 4], -1.0, 1.0, &mut rng(5));
    let (y, _) = comp.forward(&x, Mode::Training).unwrap();
    let expected = relu(&batchnorm_forward_with_stats(&x, &BatchNormParams::new(3)).unwrap().0);
    assert_eq!(y, expected);
}

#[test]
fn compression_reduces_channels_like_pointwise_oracle() {
    let mut comp = ConvBn::<f32>::new(6, 2, 1, 1, true);
    randomize(&mut comp, 6);
    let x = Tensor::<f32>::uniform([1, 6, 4, 4], -1.0, 1.0, &mut rng(7));
    let (y, cache) = comp.forward(&x, Mode::Training).unwrap();
    assert_eq!(y.channels(), 2);
    let _ = cache;
    let conv = conv2d_forward(&x, &comp.conv).unwrap();
    for o in 0..2 {
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = 0.0f64;
                for c in 0..6 {
                    acc += x.at(0, c, i, j) as f64 * comp.conv.weight.at(o, c, 0, 0) as f64;
                }
                assert!((conv.at(0, o, i, j) as f64 - acc).abs() <= 1e-5);
            }
        }
    }
}

#[test]
fn desk64_logit_shape_and_row_determinism() {
    let cfg = NetworkConfig::desk64(4).unwrap();
    let net = Network::<f32>::new(&cfg, 3).unwrap();
    let img = Tensor::<f32>::uniform([1, 3, 64, 64], 0.0, 1.0, &mut rng(1));
    let x = Tensor::stack(&[&img, &img]).unwrap();
    let pass = net.forward(&x, Mode::Inference).unwrap();
    assert_eq!(pass.logits().dims(), [2, 4, 1, 1]);
    assert_eq!(pass.logits().data()[..4], pass.logits().data()[4..]);
    let again = net.forward(&x, Mode::Inference).unwrap();
    assert_eq!(pass.logits(), again.logits());
}

#[test]
fn forward_rejects_wrong_input_dims() {
    let cfg = NetworkConfig::desk64(3).unwrap();
    let net = Network::<f32>::new(&cfg, 3).unwrap();
    assert!(matches!(
        net.forward(&Tensor::zeros([1, 3, 32, 32]), Mode::Inference),
        Err(crate::Error::Config(_))
    ));
}

#[test]
fn forward_network_agrees_with_network() {
    let cfg = NetworkConfig::desk64(3).unwrap();
    let params = build_network::<f32>(&cfg, 9).unwrap();
    let x = Tensor::<f32>::uniform([1, 3, 64, 64], 0.0, 1.0, &mut rng(2));
    let a = forward_network(&x, &cfg, &params, Mode::Inference).unwrap();
    let net = Network::from_parameters(&cfg, &params).unwrap();
    assert_eq!(&a, net.forward(&x, Mode::Inference).unwrap().logits());
}

#[test]
fn small_network_end_to_end_gradients() {
    // two stages keep the numeric sweep cheap while exercising fusion-free wiring
    let cfg = NetworkConfig::from_widths("tiny", (3, 8, 8), &[2, 2, 4], None, 3).unwrap();
    let mut net = Network::<f64>::new(&cfg, 5).unwrap();
    let x = Tensor::<f64>::uniform([2, 3, 8, 8], -1.0, 1.0, &mut rng(3));
    let labels = [0, 2];
    let pass = net.forward(&x, Mode::Training).unwrap();
    let loss = cross_entropy(pass.logits(), &labels).unwrap();
    net.zero_grad();
    net.backward(&pass, &loss.grad_logits).unwrap();
    let base = net.clone();
    let eval = |n: &Network<f64>| {
        cross_entropy(n.forward(&x, Mode::Training).unwrap().logits(), &labels)
            .unwrap()
            .value
    };
    let mut grads = Vec::new();
    net.visit(&mut |name, t| {
        if ParamKind::of(name).is_trainable() {
            grads.push((name.to_string(), t.grad.clone().unwrap()));
        }
    });
    let mut r = rng(4);
    for (name, g) in &grads {
        for _ in 0..3 {
            let i = r.random_range(0..g.len());
            let shifted = |d: f64| {
                let mut n = base.clone();
                n.visit_mut(&mut |nm, t| {
                    if nm == name {
                        t.data_mut()[i] += d;
                    }
                });
                eval(&n)
            };
            let num = (shifted(1e-6) - shifted(-1e-6)) / 2e-6;
            let diff = (g[i] - num).abs();
            assert!(
                diff <= 1e-6 || diff <= 1e-3 * g[i].abs().max(num.abs()),
                "{name}[{i}]: {} vs {num}",
                g[i]
            );
        }
    }
}

#[test]
fn predict_examples() {
    let (label, conf) = predict(&[0.0f64, 0.0, 5.0]);
    assert_eq!(label, 2);
    let oracle = 5f64.exp() / (2.0 + 5f64.exp());
    assert!((conf - oracle).abs() < 1e-12);
    assert!((conf - 0.9866).abs() < 5e-4);
    let (label, conf) = predict(&[1.5f32; 4]);
    assert_eq!(label, 0);
    assert!((conf - 0.25).abs() < 1e-7);
    let (l2, c2) = predict(&[100.0f64, 100.0, 105.0]);
    assert_eq!(l2, 2);
    assert!((c2 - oracle).abs() < 1e-12);
}

#[test]
fn softmax_argmax_matches_logit_argmax() {
    let mut r = rng(99);
    for _ in 0..1000 {
        let n = r.random_range(2..12);
        let z: Vec<f32> = (0..n).map(|_| r.random_range(-20.0..20.0)).collect();
        let q = softmax(&z);
        let arg = |v: &[f32]| {
            v.iter()
                .enumerate()
                .fold(0, |b, (i, x)| if *x > v[b] { i } else { b })
        };
        assert_eq!(arg(&q), arg(&z));
        assert_eq!(predict(&z).0, arg(&z));
    }
}

#[test]
fn conv_params_default_padding_is_same() {
    let p = ConvParams::<f32>::zeros(1, 1, 3, 1, false);
    assert_eq!(p.padding, 1);
    assert_eq!(p.output_hw(8, 8).unwrap(), (8, 8));
}
