//! Mini-batch training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{hflip, normalize, rot90, vflip, Normalization, Sample};
use crate::error::{Error, Result};
use crate::graph::{predict, Network};
use crate::optim::{cross_entropy, lr_schedule, sgd_step, SgdState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Number of augmentation variants per training sample.
pub const VARIANTS: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub halving_period: u64,
    pub augment: bool,
    pub seed: u64,
    pub log_interval: u64,
    pub normalization: Normalization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 300,
            batch_size: 32,
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            halving_period: 500,
            augment: true,
            seed: 0,
            log_interval: 10,
            normalization: Normalization::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("iterations must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if self.halving_period == 0 {
            return Err(Error::config("halving period must be at least 1"));
        }
        if self.log_interval == 0 {
            return Err(Error::config("log interval must be at least 1"));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    /// Count of completed iterations.
    pub iteration: u64,
    pub lr: f64,
    pub loss: f64,
    /// Fraction of the batch classified correctly by the training-mode logits.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub rows: Vec<LogRow>,
    pub final_loss: f64,
    pub final_accuracy: f64,
}

/// Applies augmentation variant `v` (see [`crate::data::augment`]).
fn variant<T: Scalar>(image: &Tensor<T>, v: usize) -> Tensor<T> {
    match v {
        0 => image.clone(),
        1 => hflip(image),
        2 => vflip(image),
        q => rot90(image, q - 2),
    }
}

/// Endless stream of `(sample, variant)` picks, reshuffled on exhaustion.
struct Sampler {
    pool: Vec<(usize, usize)>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(samples: usize, augment: bool, seed: u64) -> Self {
        let variants = if augment { VARIANTS } else { 1 };
        let pool = (0..samples)
            .flat_map(|s| (0..variants).map(move |v| (s, v)))
            .collect();
        let mut sampler = Sampler {
            pool,
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        sampler.pool.shuffle(&mut sampler.rng);
        sampler
    }

    fn batch(&mut self, size: usize) -> Vec<(usize, usize)> {
        let size = size.min(self.pool.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.pool.len() {
                self.pool.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.pool[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Trains `net` in place. `observer` sees every log row together with the
/// current network, and may abort training by returning an error.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    samples: &[&Sample<T>],
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&LogRow, &Network<T>) -> Result<()>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    let classes = net.config().num_classes;
    if let Some(s) = samples.iter().find(|s| s.label >= classes) {
        return Err(Error::input(format!(
            "label {} of {} exceeds the network's {classes} classes",
            s.label, s.source_path
        )));
    }
    let images = samples
        .iter()
        .map(|s| normalize(&s.image, &cfg.normalization))
        .collect::<Result<Vec<_>>>()?;
    let mut sampler = Sampler::new(samples.len(), cfg.augment, cfg.seed);
    let mut state = SgdState::new(cfg.lr, cfg.momentum, cfg.weight_decay)?;
    let mut rows = Vec::new();
    let (mut last_loss, mut last_accuracy) = (f64::NAN, f64::NAN);

    for it in 0..cfg.iterations {
        let picks = sampler.batch(cfg.batch_size);
        let batch: Vec<Tensor<T>> = picks.iter().map(|&(s, v)| variant(&images[s], v)).collect();
        let labels: Vec<usize> = picks.iter().map(|&(s, _)| samples[s].label).collect();
        let x = Tensor::stack(&batch.iter().collect::<Vec<_>>())?;

        state.lr = lr_schedule(cfg.lr, it, cfg.halving_period);
        let pass = net.forward_train(&x)?;
        let loss = cross_entropy(pass.logits(), &labels)?;
        let value = loss.value.to_f64_lossy();
        if !value.is_finite() {
            return Err(Error::Divergence(format!("loss became {value} at iteration {}", it + 1)));
        }
        net.zero_grad();
        net.backward(&pass, &loss.grad_logits)?;
        sgd_step(net, &mut state)?;

        let correct = pass
            .logits()
            .data()
            .chunks(classes)
            .zip(&labels)
            .filter(|(row, &label)| predict(row).0 == label)
            .count();
        last_loss = value;
        last_accuracy = correct as f64 / labels.len() as f64;
        if (it + 1) % cfg.log_interval == 0 {
            let row = LogRow {
                iteration: it + 1,
                lr: state.lr,
                loss: value,
                accuracy: last_accuracy,
            };
            observer(&row, net)?;
            rows.push(row);
        }
    }
    Ok(TrainSummary {
        rows,
        final_loss: last_loss,
        final_accuracy: last_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NetworkConfig;

    fn toy_samples(n: usize) -> Vec<Sample<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        (0..n)
            .map(|i| Sample {
                image: Tensor::uniform([1, 3, 8, 8], 0.0, 1.0, &mut rng),
                label: i % 2,
                source_path: format!("{i}.png"),
                fold: 0,
            })
            .collect()
    }

    fn tiny_net() -> Network<f64> {
        let cfg = NetworkConfig::from_widths("tiny", (3, 8, 8), &[2, 2, 4], None, 2).unwrap();
        Network::new(&cfg, 0).unwrap()
    }

    fn quick(iterations: u64) -> TrainConfig {
        TrainConfig {
            iterations,
            batch_size: 4,
            log_interval: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn sampler_covers_pool_each_epoch() {
        let mut s = Sampler::new(5, true, 3);
        let mut picks: Vec<_> = (0..6).flat_map(|_| s.batch(5)).collect();
        picks.sort();
        let expected: Vec<_> = (0..5).flat_map(|i| (0..6).map(move |v| (i, v))).collect();
        assert_eq!(picks, expected);
        assert_eq!(Sampler::new(3, false, 0).batch(10).len(), 3);
    }

    #[test]
    fn variants_match_augment_order() {
        let s = &toy_samples(1)[0];
        let aug = crate::data::augment(s);
        for (v, a) in aug.iter().enumerate() {
            assert_eq!(variant(&s.image, v), a.image);
        }
    }

    #[test]
    fn log_rows_follow_interval_and_schedule() {
        let samples = toy_samples(6);
        let refs: Vec<_> = samples.iter().collect();
        let mut net = tiny_net();
        let cfg = TrainConfig {
            halving_period: 4,
            ..quick(10)
        };
        let mut seen = 0;
        let summary = train(&mut net, &refs, &cfg, &mut |_, _| {
            seen += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(summary.rows.len(), 3);
        assert_eq!(seen, 3);
        let iters: Vec<u64> = summary.rows.iter().map(|r| r.iteration).collect();
        assert_eq!(iters, [3, 6, 9]);
        assert_eq!(summary.rows[0].lr, 1e-2);
        assert_eq!(summary.rows[1].lr, 5e-3);
        assert_eq!(summary.rows[2].lr, 2.5e-3);
    }

    #[test]
    fn training_is_deterministic() {
        let samples = toy_samples(6);
        let refs: Vec<_> = samples.iter().collect();
        let run = || {
            let mut net = tiny_net();
            let s = train(&mut net, &refs, &quick(6), &mut |_, _| Ok(())).unwrap();
            (s, net.parameters())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn divergence_is_reported() {
        let samples = toy_samples(4);
        let refs: Vec<_> = samples.iter().collect();
        let mut net = tiny_net();
        let cfg = TrainConfig {
            lr: 1e300,
            ..quick(20)
        };
        let err = train(&mut net, &refs, &cfg, &mut |_, _| Ok(())).unwrap_err();
        assert!(matches!(err, Error::Divergence(_)), "{err}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut net = tiny_net();
        assert!(matches!(
            train(&mut net, &[], &quick(1), &mut |_, _| Ok(())),
            Err(Error::Input(_))
        ));
        let mut samples = toy_samples(2);
        samples[1].label = 5;
        let refs: Vec<_> = samples.iter().collect();
        assert!(matches!(
            train(&mut net, &refs, &quick(1), &mut |_, _| Ok(())),
            Err(Error::Input(_))
        ));
        let refs: Vec<_> = samples[..1].iter().collect();
        let cfg = TrainConfig {
            batch_size: 0,
            ..quick(1)
        };
        assert!(matches!(train(&mut net, &refs, &cfg, &mut |_, _| Ok(())), Err(Error::Config(_))));
    }

    #[test]
    fn loss_decreases_on_a_tiny_problem() {
        let samples = toy_samples(8);
        let refs: Vec<_> = samples.iter().collect();
        let mut net = tiny_net();
        let cfg = TrainConfig {
            batch_size: 8,
            augment: false,
            lr: 0.05,
            log_interval: 1,
            ..quick(60)
        };
        let s = train(&mut net, &refs, &cfg, &mut |_, _| Ok(())).unwrap();
        assert!(s.final_loss < s.rows[0].loss * 0.5, "{} -> {}", s.rows[0].loss, s.final_loss);
    }
}
