use super::{same_dims, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Whether batch statistics (training) or running statistics (inference)
/// normalize the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

/// Per-channel batch normalization state.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T> {
    /// `(C, 1, 1, 1)` scale.
    pub gamma: Tensor<T>,
    /// `(C, 1, 1, 1)` shift.
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: T,
    pub momentum: T,
    pub mode: Mode,
}

/// Per-channel mean and biased variance over `(N, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Number of values reduced per channel.
    pub count: usize,
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads<T> {
    pub x: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> BatchNormParams<T> {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    /// `gamma = 1`, `beta = 0`, running mean 0 and variance 1.
    pub fn new(channels: usize) -> Self {
        let dims = [channels, 1, 1, 1];
        BatchNormParams {
            gamma: Tensor::full(dims, T::one()),
            beta: Tensor::zeros(dims),
            running_mean: Tensor::zeros(dims),
            running_var: Tensor::full(dims, T::one()),
            eps: T::from_f64_lossy(Self::DEFAULT_EPS),
            momentum: T::from_f64_lossy(Self::DEFAULT_MOMENTUM),
            mode: Mode::Training,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Exponential moving average update; the variance is stored unbiased.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = self.momentum;
        let keep = T::one() - m;
        let correction = if stats.count > 1 {
            T::from_usize(stats.count).unwrap() / T::from_usize(stats.count - 1).unwrap()
        } else {
            T::one()
        };
        for (r, &v) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * v;
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + m * v * correction;
        }
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels() != self.channels() {
            return Err(Error::config(format!(
                "batch norm over {} channels received input {:?}",
                self.channels(),
                x.dims()
            )));
        }
        if self.eps <= T::zero() {
            return Err(Error::config("batch norm eps must be positive"));
        }
        Ok(())
    }
}

/// Two-pass per-channel mean and biased variance.
pub fn batch_statistics<T: Scalar>(x: &Tensor<T>) -> BatchStats<T> {
    let [n, c, h, w] = x.dims();
    let hw = h * w;
    let count = n * hw;
    let denom = T::from_usize(count.max(1)).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            let start = (b * c + ch) * hw;
            s += x.data()[start..start + hw].iter().copied().sum::<T>();
        }
        let mu = s / denom;
        let mut sq = T::zero();
        for b in 0..n {
            let start = (b * c + ch) * hw;
            for &v in &x.data()[start..start + hw] {
                let d = v - mu;
                sq += d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = sq / denom;
    }
    BatchStats { mean, var, count }
}

/// Normalizes without touching the running statistics. In training mode the
/// batch statistics are returned so the caller can fold them in.
pub fn batchnorm_forward_with_stats<T: Scalar>(
    x: &Tensor<T>,
    p: &BatchNormParams<T>,
) -> Result<(Tensor<T>, Option<BatchStats<T>>)> {
    normalize(x, p, p.mode)
}

/// [`batchnorm_forward_with_stats`] with the mode supplied by the caller
/// instead of read from `p`.
pub(crate) fn normalize<T: Scalar>(
    x: &Tensor<T>,
    p: &BatchNormParams<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Option<BatchStats<T>>)> {
    p.check(x)?;
    let [n, c, h, w] = x.dims();
    let hw = h * w;
    let (mean, var, stats) = match mode {
        Mode::Training => {
            if n * hw <= 1 {
                return Err(Error::DegenerateStatistics(format!(
                    "training-mode batch norm needs more than one value per channel, input {:?}",
                    x.dims()
                )));
            }
            let stats = batch_statistics(x);
            (stats.mean.clone(), stats.var.clone(), Some(stats))
        }
        Mode::Inference => (
            p.running_mean.data().to_vec(),
            p.running_var.data().to_vec(),
            None,
        ),
    };
    let mut out = Tensor::zeros(x.dims());
    for ch in 0..c {
        let inv = T::one() / (var[ch] + p.eps).sqrt();
        let scale = p.gamma.data()[ch] * inv;
        let shift = p.beta.data()[ch] - mean[ch] * scale;
        for b in 0..n {
            let start = (b * c + ch) * hw;
            let src = &x.data()[start..start + hw];
            let dst = &mut out.data_mut()[start..start + hw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s * scale + shift;
            }
        }
    }
    Ok((out, stats))
}

/// Normalizes `x` and, in training mode, updates the running statistics.
pub fn batchnorm_forward<T: Scalar>(x: &Tensor<T>, p: &mut BatchNormParams<T>) -> Result<Tensor<T>> {
    let (out, stats) = batchnorm_forward_with_stats(x, p)?;
    if let Some(stats) = stats {
        p.update_running(&stats);
    }
    Ok(out)
}

/// Backward pass through the normalization, recomputing the batch
/// statistics from `x` in training mode.
pub fn batchnorm_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &BatchNormParams<T>,
    grad_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    normalize_backward(x, p, p.mode, grad_out)
}

pub(crate) fn normalize_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &BatchNormParams<T>,
    mode: Mode,
    grad_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    p.check(x)?;
    same_dims(x, grad_out, "batch norm backward")?;
    let [n, c, h, w] = x.dims();
    let hw = h * w;
    let count = n * hw;
    let (mean, var) = match mode {
        Mode::Training => {
            if count <= 1 {
                return Err(Error::DegenerateStatistics(format!(
                    "training-mode batch norm needs more than one value per channel, input {:?}",
                    x.dims()
                )));
            }
            let s = batch_statistics(x);
            (s.mean, s.var)
        }
        Mode::Inference => (
            p.running_mean.data().to_vec(),
            p.running_var.data().to_vec(),
        ),
    };
    let m = T::from_usize(count).unwrap();
    let mut grad_x = Tensor::zeros(x.dims());
    let mut grad_gamma = vec![T::zero(); c];
    let mut grad_beta = vec![T::zero(); c];
    for ch in 0..c {
        let inv = T::one() / (var[ch] + p.eps).sqrt();
        let mu = mean[ch];
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for b in 0..n {
            let start = (b * c + ch) * hw;
            let xs = &x.data()[start..start + hw];
            let gs = &grad_out.data()[start..start + hw];
            for (&xv, &gv) in xs.iter().zip(gs) {
                sum_g += gv;
                sum_gx += gv * (xv - mu) * inv;
            }
        }
        grad_beta[ch] = sum_g;
        grad_gamma[ch] = sum_gx;
        let scale = p.gamma.data()[ch] * inv;
        let (mean_g, mean_gx) = (sum_g / m, sum_gx / m);
        for b in 0..n {
            let start = (b * c + ch) * hw;
            let xs = &x.data()[start..start + hw];
            let gs = &grad_out.data()[start..start + hw];
            let dst = &mut grad_x.data_mut()[start..start + hw];
            for ((d, &xv), &gv) in dst.iter_mut().zip(xs).zip(gs) {
                *d = match mode {
                    Mode::Training => {
                        let xhat = (xv - mu) * inv;
                        scale * (gv - mean_g - xhat * mean_gx)
                    }
                    Mode::Inference => scale * gv,
                };
            }
        }
    }
    Ok(BatchNormGrads {
        x: grad_x,
        gamma: grad_gamma,
        beta: grad_beta,
    })
}
