use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::blocks::{
    ConvBn, ConvBnCache, DenseBlock, DenseBranch, DenseBranchCache, Layer, PlainBlock, PlainCache,
    ResidualBlock, ResidualBlockCache,
};
use super::config::{BlockKind, NetworkConfig};
use super::params::{ParamKind, ParameterSet, Parameters};
use crate::error::{Error, Result};
use crate::optim::softmax;
use crate::scalar::Scalar;
use crate::tensor::{
    add, concat_backward, concat_channels, linear_backward, linear_forward, LinearParams, Mode,
    Tensor,
};

fn at(path: &str) -> impl FnOnce(Error) -> Error + '_ {
    move |e| match e {
        Error::Config(m) => Error::Config(format!("{path}: {m}")),
        other => other,
    }
}

/// One depth level: a plain block and a residual block. Small residual
/// blocks never downsample, so the residual side enters through a stride-2
/// conv-BN-ReLU that also adapts the channel count.
#[derive(Clone, Debug)]
pub struct Stage<T> {
    pub plain: PlainBlock<T>,
    pub entry: Option<ConvBn<T>>,
    pub residual: ResidualBlock<T>,
}

#[derive(Clone, Debug)]
struct StageCache<T> {
    plain: PlainCache<T>,
    entry: Option<ConvBnCache<T>>,
    residual: ResidualBlockCache<T>,
}

/// The full three-branch network: parameters plus the topology they follow.
#[derive(Clone, Debug)]
pub struct Network<T> {
    cfg: NetworkConfig,
    pub stages: Vec<Stage<T>>,
    /// Compressions after stages 2 ..= n-1.
    pub fusions: Vec<ConvBn<T>>,
    pub dense: DenseBranch<T>,
    pub head: LinearParams<T>,
}

/// Everything a backward pass needs, plus the outputs of interest.
#[derive(Clone, Debug)]
pub struct ForwardPass<T> {
    stages: Vec<StageCache<T>>,
    fusions: Vec<ConvBnCache<T>>,
    dense: DenseBranchCache<T>,
    features: Tensor<T>,
    logits: Tensor<T>,
}

impl<T: Scalar> ForwardPass<T> {
    /// `(N, num_classes, 1, 1)` raw scores.
    pub fn logits(&self) -> &Tensor<T> {
        &self.logits
    }

    /// Final `[dense; residual; plain]` feature maps before flattening.
    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }
}

impl<T: Scalar> Network<T> {
    /// Allocates every block and draws He fan-in normal weights from `seed`.
    /// Biases and `beta` start at zero, `gamma` at one.
    pub fn new(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let stages = cfg
            .stages
            .iter()
            .enumerate()
            .map(|(s, spec)| {
                let layers = if spec.plain.kind == BlockKind::PlainSmall { 2 } else { 3 };
                let plain = PlainBlock::new(spec.plain.in_channels, spec.plain.out_channels, layers);
                let residual_in = match s {
                    0 => cfg.input_dims.0,
                    1 => cfg.stages[0].residual.out_channels,
                    _ => cfg.compression_channels[s - 2],
                };
                let (entry, residual) = match spec.residual.kind {
                    BlockKind::ResidualSmall => (
                        Some(ConvBn::new(residual_in, spec.residual.out_channels, 3, 2, true)),
                        ResidualBlock::small(spec.residual.out_channels),
                    ),
                    _ => (
                        None,
                        ResidualBlock::large(spec.residual.in_channels, spec.residual.out_channels),
                    ),
                };
                Stage {
                    plain,
                    entry,
                    residual,
                }
            })
            .collect();
        let fusions = cfg
            .compression_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let s = &cfg.stages[i + 1];
                ConvBn::new(s.plain.out_channels + s.residual.out_channels, c, 1, 1, true)
            })
            .collect();
        let d = &cfg.dense_branch;
        let dense = DenseBranch {
            stem: ConvBn::new(cfg.input_dims.0, d.stem, 3, 1, true),
            pools: cfg.stages.len(),
            block: DenseBlock::new(
                d.stem,
                d.block.dense_layers.unwrap_or(1),
                d.block.growth.unwrap_or(1),
            ),
            compress: ConvBn::new(d.block.out_channels, d.compress_to, 1, 1, true),
        };
        let mut net = Network {
            cfg: cfg.clone(),
            stages,
            fusions,
            dense,
            head: LinearParams::zeros(cfg.head_inputs(), cfg.num_classes),
        };
        net.initialize(seed);
        Ok(net)
    }

    /// Rebuilds a network from named tensors; every parameter of `cfg` must
    /// be present with matching dims.
    pub fn from_parameters(cfg: &NetworkConfig, params: &Parameters<T>) -> Result<Self> {
        let mut net = Network::new(cfg, 0)?;
        net.load_parameters(params)?;
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    fn initialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.visit_mut(&mut |name, t| {
            if ParamKind::of(name) == ParamKind::Weight {
                let [o, i, kh, kw] = t.dims();
                let fan_in = (i * kh * kw) as f64;
                *t = Tensor::randn([o, i, kh, kw], (2.0 / fan_in).sqrt(), &mut rng);
            }
        });
    }

    /// Snapshot of every named tensor, buffers included.
    pub fn parameters(&self) -> Parameters<T> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| {
            let mut t = t.clone();
            t.grad = None;
            out.push((name.to_string(), t));
        });
        out.into_iter().collect()
    }

    pub fn load_parameters(&mut self, params: &Parameters<T>) -> Result<()> {
        let mut missing = None;
        self.visit_mut(&mut |name, t| {
            if missing.is_some() {
                return;
            }
            match params.get(name) {
                Some(src) if src.dims() == t.dims() => {
                    *t = src.clone();
                    t.grad = None;
                }
                Some(src) => {
                    missing = Some(Error::config(format!(
                        "parameter {name} has dims {:?}, expected {:?}",
                        src.dims(),
                        t.dims()
                    )))
                }
                None => missing = Some(Error::config(format!("parameter {name} is missing"))),
            }
        });
        match missing {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut(&mut |_, t| t.grad = None);
    }

    /// Runs all three branches. In training mode, the batch statistics are
    /// recorded in the pass but the running statistics are left untouched
    /// (see [`Network::commit_running_stats`]).
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<ForwardPass<T>> {
        let (c, h, w) = self.cfg.input_dims;
        if [x.channels(), x.height(), x.width()] != [c, h, w] || x.batch() == 0 {
            return Err(Error::config(format!(
                "network expects (N, {c}, {h}, {w}) input, got {:?}",
                x.dims()
            )));
        }
        let n = self.stages.len();
        let mut stage_caches = Vec::with_capacity(n);
        let mut fusion_caches = Vec::with_capacity(self.fusions.len());
        let mut plain_in = x.clone();
        let mut residual_in = x.clone();
        for (s, stage) in self.stages.iter().enumerate() {
            let path = format!("stage{}", s + 1);
            let (p_out, plain) = stage
                .plain
                .forward(&plain_in, mode)
                .map_err(at(&format!("{path}.plain")))?;
            let (r, entry) = match &stage.entry {
                Some(e) => {
                    let (r, c) = e
                        .forward(&residual_in, mode)
                        .map_err(at(&format!("{path}.residual.entry")))?;
                    (r, Some(c))
                }
                None => (residual_in.clone(), None),
            };
            let (r_out, residual) = stage
                .residual
                .forward(&r, mode)
                .map_err(at(&format!("{path}.residual")))?;
            stage_caches.push(StageCache {
                plain,
                entry,
                residual,
            });
            if s >= 1 && s + 1 < n {
                let fpath = format!("fusion{}", s + 1);
                let cat = concat_channels(&[&p_out, &r_out]).map_err(at(&fpath))?;
                let (f, fc) = self.fusions[s - 1].forward(&cat, mode).map_err(at(&fpath))?;
                fusion_caches.push(fc);
                plain_in = f.clone();
                residual_in = f;
            } else {
                plain_in = p_out;
                residual_in = r_out;
            }
        }
        let (d, dense) = self.dense.forward(x, mode).map_err(at("dense"))?;
        let features = concat_channels(&[&d, &residual_in, &plain_in]).map_err(at("head"))?;
        let logits = linear_forward(&features, &self.head).map_err(at("head"))?;
        Ok(ForwardPass {
            stages: stage_caches,
            fusions: fusion_caches,
            dense,
            features,
            logits,
        })
    }

    /// Forward in training mode followed by the running-statistics update.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<ForwardPass<T>> {
        let pass = self.forward(x, Mode::Training)?;
        self.commit_running_stats(&pass);
        Ok(pass)
    }

    pub fn commit_running_stats(&mut self, pass: &ForwardPass<T>) {
        for (stage, c) in self.stages.iter_mut().zip(&pass.stages) {
            stage.plain.commit(&c.plain);
            if let (Some(e), Some(ec)) = (stage.entry.as_mut(), c.entry.as_ref()) {
                e.commit(ec);
            }
            stage.residual.commit(&c.residual);
        }
        for (f, c) in self.fusions.iter_mut().zip(&pass.fusions) {
            f.commit(c);
        }
        self.dense.commit(&pass.dense);
    }

    /// Back-propagates `grad_logits`, accumulating into every parameter's
    /// gradient buffer. Returns the gradient with respect to the input.
    pub fn backward(&mut self, pass: &ForwardPass<T>, grad_logits: &Tensor<T>) -> Result<Tensor<T>> {
        let hg = linear_backward(&pass.features, &self.head, grad_logits).map_err(at("head"))?;
        self.head.weight.accumulate_grad(hg.weight.data());
        self.head.bias.accumulate_grad(&hg.bias);
        let mut parts = concat_backward(&hg.x, &self.cfg.final_channels()).map_err(at("head"))?;
        let mut g_plain = parts.pop().expect("three parts");
        let mut g_residual = parts.pop().expect("three parts");
        let g_dense = parts.pop().expect("three parts");

        let n = self.stages.len();
        let mut g_input = None;
        for s in (0..n).rev() {
            let stage = &mut self.stages[s];
            let cache = &pass.stages[s];
            let gp_in = stage.plain.backward(&cache.plain, &g_plain)?;
            let mut gr_in = stage.residual.backward(&cache.residual, &g_residual)?;
            if let (Some(e), Some(ec)) = (stage.entry.as_mut(), cache.entry.as_ref()) {
                gr_in = e.backward(ec, &gr_in)?;
            }
            if s == 0 {
                g_input = Some(add(&gp_in, &gr_in)?);
            } else if s >= 2 {
                // stage s consumed the output of fusion after stage s-1
                let g_f = add(&gp_in, &gr_in)?;
                let g_cat = self.fusions[s - 2].backward(&pass.fusions[s - 2], &g_f)?;
                let prev = &self.cfg.stages[s - 1];
                let mut split = concat_backward(
                    &g_cat,
                    &[prev.plain.out_channels, prev.residual.out_channels],
                )?;
                g_residual = split.pop().expect("two parts");
                g_plain = split.pop().expect("two parts");
            } else {
                g_plain = gp_in;
                g_residual = gr_in;
            }
        }
        let g_dense_in = self.dense.backward(&pass.dense, &g_dense)?;
        add(&g_input.expect("at least one stage"), &g_dense_in)
    }
}

impl<T: Scalar> ParameterSet<T> for Network<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (s, stage) in self.stages.iter().enumerate() {
            let p = format!("stage{}", s + 1);
            stage.plain.visit(&format!("{p}.plain"), f);
            if let Some(e) = &stage.entry {
                e.visit(&format!("{p}.residual.entry"), f);
            }
            stage.residual.visit(&format!("{p}.residual"), f);
        }
        for (i, fu) in self.fusions.iter().enumerate() {
            fu.visit(&format!("fusion{}", i + 2), f);
        }
        self.dense.visit("dense", f);
        f("head.weight", &self.head.weight);
        f("head.bias", &self.head.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (s, stage) in self.stages.iter_mut().enumerate() {
            let p = format!("stage{}", s + 1);
            stage.plain.visit_mut(&format!("{p}.plain"), f);
            if let Some(e) = stage.entry.as_mut() {
                e.visit_mut(&format!("{p}.residual.entry"), f);
            }
            stage.residual.visit_mut(&format!("{p}.residual"), f);
        }
        for (i, fu) in self.fusions.iter_mut().enumerate() {
            fu.visit_mut(&format!("fusion{}", i + 2), f);
        }
        self.dense.visit_mut("dense", f);
        f("head.weight", &mut self.head.weight);
        f("head.bias", &mut self.head.bias);
    }
}

/// Allocates and initializes all parameters for `cfg`.
pub fn build_network<T: Scalar>(cfg: &NetworkConfig, seed: u64) -> Result<Parameters<T>> {
    Ok(Network::<T>::new(cfg, seed)?.parameters())
}

/// Logits for `x` under the given parameters.
pub fn forward_network<T: Scalar>(
    x: &Tensor<T>,
    cfg: &NetworkConfig,
    params: &Parameters<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    let net = Network::from_parameters(cfg, params)?;
    Ok(net.forward(x, mode)?.logits)
}

/// Class with the highest softmax probability (lowest index on ties) and
/// that probability.
pub fn predict<T: Scalar>(logits: &[T]) -> (usize, T) {
    let q = softmax(logits);
    let mut best = 0;
    for (i, &v) in q.iter().enumerate() {
        if v > q[best] {
            best = i;
        }
    }
    (best, q[best])
}
