//! Building blocks of the three branches. Each block owns its parameters,
//! returns a cache from `forward`, and accumulates parameter gradients into
//! the tensors' gradient buffers during `backward`.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{
    add, concat_backward, concat_channels, conv2d_backward, conv2d_forward, maxpool2,
    maxpool2_backward, normalize, normalize_backward, relu, relu_backward, BatchNormParams,
    BatchStats, ConvParams, Mode, PoolIndices, Tensor,
};

/// Forward/backward contract shared by all blocks.
pub trait Layer<T: Scalar> {
    type Cache;

    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Self::Cache)>;

    /// Returns the gradient with respect to the block input.
    fn backward(&mut self, cache: &Self::Cache, grad: &Tensor<T>) -> Result<Tensor<T>>;

    /// Folds training-mode batch statistics into the running statistics.
    fn commit(&mut self, cache: &Self::Cache);

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>));
}

fn visit_conv<T: Scalar>(c: &ConvParams<T>, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
    f(&format!("{prefix}.weight"), &c.weight);
    if let Some(b) = &c.bias {
        f(&format!("{prefix}.bias"), b);
    }
}

fn visit_conv_mut<T: Scalar>(
    c: &mut ConvParams<T>,
    prefix: &str,
    f: &mut dyn FnMut(&str, &mut Tensor<T>),
) {
    f(&format!("{prefix}.weight"), &mut c.weight);
    if let Some(b) = c.bias.as_mut() {
        f(&format!("{prefix}.bias"), b);
    }
}

/// Convolution (no bias) followed by batch norm and, optionally, ReLU.
/// With ReLU this is the composite function used across the residual and
/// dense branches and for channel compression.
#[derive(Clone, Debug)]
pub struct ConvBn<T> {
    pub conv: ConvParams<T>,
    pub bn: BatchNormParams<T>,
    pub relu: bool,
}

#[derive(Clone, Debug)]
pub struct ConvBnCache<T> {
    input: Tensor<T>,
    conv_out: Tensor<T>,
    bn_out: Option<Tensor<T>>,
    stats: Option<BatchStats<T>>,
    mode: Mode,
}

impl<T: Scalar> ConvBn<T> {
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize, relu: bool) -> Self {
        ConvBn {
            conv: ConvParams::zeros(c_in, c_out, k, stride, false),
            bn: BatchNormParams::new(c_out),
            relu,
        }
    }
}

impl<T: Scalar> Layer<T> for ConvBn<T> {
    type Cache = ConvBnCache<T>;

    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, ConvBnCache<T>)> {
        let conv_out = conv2d_forward(x, &self.conv)?;
        let (bn_out, stats) = normalize(&conv_out, &self.bn, mode)?;
        let (out, bn_cache) = if self.relu {
            (relu(&bn_out), Some(bn_out))
        } else {
            (bn_out, None)
        };
        Ok((
            out,
            ConvBnCache {
                input: x.clone(),
                conv_out,
                bn_out: bn_cache,
                stats,
                mode,
            },
        ))
    }

    fn backward(&mut self, cache: &ConvBnCache<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g = match &cache.bn_out {
            Some(pre) => relu_backward(pre, grad)?,
            None => grad.clone(),
        };
        let bn = normalize_backward(&cache.conv_out, &self.bn, cache.mode, &g)?;
        self.bn.gamma.accumulate_grad(&bn.gamma);
        self.bn.beta.accumulate_grad(&bn.beta);
        let conv = conv2d_backward(&cache.input, &self.conv, &bn.x)?;
        self.conv.weight.accumulate_grad(conv.weight.data());
        Ok(conv.x)
    }

    fn commit(&mut self, cache: &ConvBnCache<T>) {
        if let Some(stats) = &cache.stats {
            self.bn.update_running(stats);
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        visit_conv(&self.conv, &format!("{prefix}.conv"), f);
        f(&format!("{prefix}.bn.gamma"), &self.bn.gamma);
        f(&format!("{prefix}.bn.beta"), &self.bn.beta);
        f(&format!("{prefix}.bn.running_mean"), &self.bn.running_mean);
        f(&format!("{prefix}.bn.running_var"), &self.bn.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        visit_conv_mut(&mut self.conv, &format!("{prefix}.conv"), f);
        f(&format!("{prefix}.bn.gamma"), &mut self.bn.gamma);
        f(&format!("{prefix}.bn.beta"), &mut self.bn.beta);
        f(&format!("{prefix}.bn.running_mean"), &mut self.bn.running_mean);
        f(&format!("{prefix}.bn.running_var"), &mut self.bn.running_var);
    }
}

/// Plain module: 2 (small) or 3 (large) conv+ReLU layers, then 2x2 max pooling.
#[derive(Clone, Debug)]
pub struct PlainBlock<T> {
    pub convs: Vec<ConvParams<T>>,
}

#[derive(Clone, Debug)]
pub struct PlainCache<T> {
    layers: Vec<(Tensor<T>, Tensor<T>)>,
    pool: PoolIndices,
}

impl<T: Scalar> PlainBlock<T> {
    pub fn new(c_in: usize, c_out: usize, layers: usize) -> Self {
        let convs = (0..layers)
            .map(|i| ConvParams::zeros(if i == 0 { c_in } else { c_out }, c_out, 3, 1, true))
            .collect();
        PlainBlock { convs }
    }
}

impl<T: Scalar> Layer<T> for PlainBlock<T> {
    type Cache = PlainCache<T>;

    fn forward(&self, x: &Tensor<T>, _mode: Mode) -> Result<(Tensor<T>, PlainCache<T>)> {
        let mut layers = Vec::with_capacity(self.convs.len());
        let mut h = x.clone();
        for conv in &self.convs {
            let pre = conv2d_forward(&h, conv)?;
            let next = relu(&pre);
            layers.push((h, pre));
            h = next;
        }
        let (out, pool) = maxpool2(&h)?;
        Ok((out, PlainCache { layers, pool }))
    }

    fn backward(&mut self, cache: &PlainCache<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = maxpool2_backward(&cache.pool, grad)?;
        for (conv, (input, pre)) in self.convs.iter_mut().zip(&cache.layers).rev() {
            let gp = relu_backward(pre, &g)?;
            let cg = conv2d_backward(input, conv, &gp)?;
            conv.weight.accumulate_grad(cg.weight.data());
            if let (Some(b), Some(gb)) = (conv.bias.as_mut(), cg.bias.as_ref()) {
                b.accumulate_grad(gb);
            }
            g = cg.x;
        }
        Ok(g)
    }

    fn commit(&mut self, _cache: &PlainCache<T>) {}

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, c) in self.convs.iter().enumerate() {
            visit_conv(c, &format!("{prefix}.conv{i}"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            visit_conv_mut(c, &format!("{prefix}.conv{i}"), f);
        }
    }
}

/// `out = BN2(conv2(ReLU(BN1(conv1(x))))) + x`.
#[derive(Clone, Debug)]
pub struct ResidualUnit<T> {
    pub first: ConvBn<T>,
    pub second: ConvBn<T>,
}

#[derive(Clone, Debug)]
pub struct ResidualUnitCache<T> {
    first: ConvBnCache<T>,
    second: ConvBnCache<T>,
}

impl<T: Scalar> ResidualUnit<T> {
    pub fn new(channels: usize) -> Self {
        ResidualUnit {
            first: ConvBn::new(channels, channels, 3, 1, true),
            second: ConvBn::new(channels, channels, 3, 1, false),
        }
    }
}

impl<T: Scalar> Layer<T> for ResidualUnit<T> {
    type Cache = ResidualUnitCache<T>;

    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, ResidualUnitCache<T>)> {
        let (a, first) = self.first.forward(x, mode)?;
        let (h, second) = self.second.forward(&a, mode)?;
        Ok((add(&h, x)?, ResidualUnitCache { first, second }))
    }

    fn backward(&mut self, cache: &ResidualUnitCache<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let ga = self.second.backward(&cache.second, grad)?;
        let gx = self.first.backward(&cache.first, &ga)?;
        add(&gx, grad)
    }

    fn commit(&mut self, cache: &ResidualUnitCache<T>) {
        self.first.commit(&cache.first);
        self.second.commit(&cache.second);
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.first.visit(&format!("{prefix}.layer1"), f);
        self.second.visit(&format!("{prefix}.layer2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.first.visit_mut(&format!("{prefix}.layer1"), f);
        self.second.visit_mut(&format!("{prefix}.layer2"), f);
    }
}

/// Two residual units; the large variant puts a stride-2 conv-BN-ReLU
/// between them so its output matches the paired plain block's pooled size.
#[derive(Clone, Debug)]
pub struct ResidualBlock<T> {
    pub first: ResidualUnit<T>,
    pub down: Option<ConvBn<T>>,
    pub second: ResidualUnit<T>,
}

#[derive(Clone, Debug)]
pub struct ResidualBlockCache<T> {
    first: ResidualUnitCache<T>,
    down: Option<ConvBnCache<T>>,
    second: ResidualUnitCache<T>,
}

impl<T: Scalar> ResidualBlock<T> {
    /// Shape-preserving block.
    pub fn small(channels: usize) -> Self {
        ResidualBlock {
            first: ResidualUnit::new(channels),
            down: None,
            second: ResidualUnit::new(channels),
        }
    }

    /// Halves H and W and maps `c_in` to `c_out` channels.
    pub fn large(c_in: usize, c_out: usize) -> Self {
        ResidualBlock {
            first: ResidualUnit::new(c_in),
            down: Some(ConvBn::new(c_in, c_out, 3, 2, true)),
            second: ResidualUnit::new(c_out),
        }
    }
}

impl<T: Scalar> Layer<T> for ResidualBlock<T> {
    type Cache = ResidualBlockCache<T>;

    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, ResidualBlockCache<T>)> {
        let (h, first) = self.first.forward(x, mode)?;
        let (h, down) = match &self.down {
            Some(d) => {
                let (h, c) = d.forward(&h, mode)?;
                (h, Some(c))
            }
            None => (h, None),
        };
        let (out, second) = self.second.forward(&h, mode)?;
        Ok((out, ResidualBlockCache { first, down, second }))
    }

    fn backward(&mut self, cache: &ResidualBlockCache<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = self.second.backward(&cache.second, grad)?;
        if let (Some(d), Some(c)) = (self.down.as_mut(), cache.down.as_ref()) {
            g = d.backward(c, &g)?;
        }
        self.first.backward(&cache.first, &g)
    }

    fn commit(&mut self, cache: &ResidualBlockCache<T>) {
        self.first.commit(&cache.first);
        if let (Some(d), Some(c)) = (self.down.as_mut(), cache.down.as_ref()) {
            d.commit(c);
        }
        self.second.commit(&cache.second);
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.first.visit(&format!("{prefix}.unit0"), f);
        if let Some(d) = &self.down {
            d.visit(&format!("{prefix}.down"), f);
        }
        self.second.visit(&format!("{prefix}.unit1"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.first.visit_mut(&format!("{prefix}.unit0"), f);
        if let Some(d) = self.down.as_mut() {
            d.visit_mut(&format!("{prefix}.down"), f);
        }
        self.second.visit_mut(&format!("{prefix}.unit1"), f);
    }
}

/// Layer `n` sees the concatenation of the block input and all earlier
/// layer outputs; the block emits `[y_0; y_1; ...; y_L]`.
#[derive(Clone, Debug)]
pub struct DenseBlock<T> {
    pub layers: Vec<ConvBn<T>>,
}

#[derive(Clone, Debug)]
pub struct DenseCache<T> {
    layers: Vec<ConvBnCache<T>>,
    widths: Vec<usize>,
}

impl<T: Scalar> DenseBlock<T> {
    pub fn new(stem: usize, layers: usize, growth: usize) -> Self {
        DenseBlock {
            layers: (0..layers)
                .map(|i| ConvBn::new(stem + i * growth, growth, 3, 1, true))
                .collect(),
        }
    }

    pub fn output_channels(&self, input: usize) -> usize {
        input + self.layers.iter().map(|l| l.conv.out_channels()).sum::<usize>()
    }
}

impl<T: Scalar> Layer<T> for DenseBlock<T> {
    type Cache = DenseCache<T>;

    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, DenseCache<T>)> {
        let mut features = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut widths = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, c) = layer.forward(&features, mode)?;
            widths.push(features.channels());
            features = concat_channels(&[&features, &y])?;
            caches.push(c);
        }
        Ok((
            features,
            DenseCache {
                layers: caches,
                widths,
            },
        ))
    }

    fn backward(&mut self, cache: &DenseCache<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad.clone();
        for ((layer, c), &w) in self.layers.iter_mut().zip(&cache.layers).zip(&cache.widths).rev() {
            let mut parts = concat_backward(&g, &[w, g.channels() - w])?;
            let gy = parts.pop().expect("two parts");
            let prefix = parts.pop().expect("two parts");
            let from_layer = layer.backward(c, &gy)?;
            g = add(&prefix, &from_layer)?;
        }
        Ok(g)
    }

    fn commit(&mut self, cache: &DenseCache<T>) {
        for (l, c) in self.layers.iter_mut().zip(&cache.layers) {
            l.commit(c);
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}.layer{i}"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.layer{i}"), f);
        }
    }
}

/// Stem conv at input resolution, one 2x2 pool per stage, the dense block,
/// then a 1x1 compression.
#[derive(Clone, Debug)]
pub struct DenseBranch<T> {
    pub stem: ConvBn<T>,
    pub pools: usize,
    pub block: DenseBlock<T>,
    pub compress: ConvBn<T>,
}

#[derive(Clone, Debug)]
pub struct DenseBranchCache<T> {
    stem: ConvBnCache<T>,
    pools: Vec<PoolIndices>,
    block: DenseCache<T>,
    compress: ConvBnCache<T>,
}

impl<T: Scalar> Layer<T> for DenseBranch<T> {
    type Cache = DenseBranchCache<T>;

    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, DenseBranchCache<T>)> {
        let (mut h, stem) = self.stem.forward(x, mode)?;
        let mut pools = Vec::with_capacity(self.pools);
        for _ in 0..self.pools {
            let (p, idx) = maxpool2(&h)?;
            pools.push(idx);
            h = p;
        }
        let (h, block) = self.block.forward(&h, mode)?;
        let (out, compress) = self.compress.forward(&h, mode)?;
        Ok((
            out,
            DenseBranchCache {
                stem,
                pools,
                block,
                compress,
            },
        ))
    }

    fn backward(&mut self, cache: &DenseBranchCache<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.compress.backward(&cache.compress, grad)?;
        let mut g = self.block.backward(&cache.block, &g)?;
        for idx in cache.pools.iter().rev() {
            g = maxpool2_backward(idx, &g)?;
        }
        self.stem.backward(&cache.stem, &g)
    }

    fn commit(&mut self, cache: &DenseBranchCache<T>) {
        self.stem.commit(&cache.stem);
        self.block.commit(&cache.block);
        self.compress.commit(&cache.compress);
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.stem.visit(&format!("{prefix}.stem"), f);
        self.block.visit(&format!("{prefix}.block"), f);
        self.compress.visit(&format!("{prefix}.compress"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.stem.visit_mut(&format!("{prefix}.stem"), f);
        self.block.visit_mut(&format!("{prefix}.block"), f);
        self.compress.visit_mut(&format!("{prefix}.compress"), f);
    }
}
