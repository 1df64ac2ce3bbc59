use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Weights of a square 2-D convolution (cross-correlation, no kernel flip).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    /// `(C_out, C_in, k, k)`.
    pub weight: Tensor<T>,
    /// `(C_out, 1, 1, 1)`; absent for convolutions feeding a batch norm.
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> ConvParams<T> {
    /// Zero-initialized convolution with "same" padding `(k - 1) / 2`.
    pub fn zeros(c_in: usize, c_out: usize, k: usize, stride: usize, bias: bool) -> Self {
        ConvParams {
            weight: Tensor::zeros([c_out, c_in, k, k]),
            bias: bias.then(|| Tensor::zeros([c_out, 1, 1, 1])),
            stride,
            padding: (k.saturating_sub(1)) / 2,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }

    /// Output spatial dims for an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel();
        let ([_, _, kh, kw], s, p) = (self.weight.dims(), self.stride, self.padding);
        if kh != kw || !(k == 1 || k == 3) {
            return Err(Error::config(format!(
                "convolution kernel must be 1x1 or 3x3, got {kh}x{kw}"
            )));
        }
        if s == 0 {
            return Err(Error::config("convolution stride must be positive"));
        }
        if h + 2 * p < k || w + 2 * p < k {
            return Err(Error::config(format!(
                "convolution {k}x{k} with padding {p} does not fit a {h}x{w} input"
            )));
        }
        Ok(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        if x.channels() != self.in_channels() {
            return Err(Error::config(format!(
                "conv input {:?} does not match weight {:?} (C_in)",
                x.dims(),
                self.weight.dims()
            )));
        }
        if let Some(b) = &self.bias {
            if b.len() != self.out_channels() {
                return Err(Error::config(format!(
                    "conv bias {:?} does not match weight {:?}",
                    b.dims(),
                    self.weight.dims()
                )));
            }
        }
        self.output_hw(x.height(), x.width())
    }

    fn is_pointwise(&self) -> bool {
        self.kernel() == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Gradients produced by [`conv2d_backward`].
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub x: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Vec<T>>,
}

struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

impl Geometry {
    /// Output columns `[lo, hi)` whose input column `ox * stride + kx - pad`
    /// falls inside the image, and the input column of `lo`.
    fn valid_cols(&self, kx: usize) -> (usize, usize, usize) {
        let first = self.pad.saturating_sub(kx).div_ceil(self.stride);
        let last = (self.w + self.pad).checked_sub(kx + 1).map_or(0, |m| m / self.stride + 1);
        let (lo, hi) = (first.min(self.ow), last.min(self.ow));
        if lo >= hi {
            return (0, 0, 0);
        }
        (lo, hi, lo * self.stride + kx - self.pad)
    }

    /// Input row for output row `oy` and kernel row `ky`, if inside the image.
    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        (oy * self.stride + ky)
            .checked_sub(self.pad)
            .filter(|&iy| iy < self.h)
    }
}

/// Unfolds one sample into a `(C_in*k*k) x (H'*W')` patch matrix.
fn im2col<T: Scalar>(x: &[T], g: &Geometry, col: &mut [T]) {
    let cols = g.cols();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                let (lo, hi, ix0) = g.valid_cols(kx);
                for oy in 0..g.oh {
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let Some(iy) = g.input_row(oy, ky) else {
                        line.fill(T::zero());
                        continue;
                    };
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let src = &plane[iy * g.w + ix0..(iy + 1) * g.w];
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[..hi - lo]);
                    } else {
                        for (d, &v) in line[lo..hi].iter_mut().zip(src.iter().step_by(g.stride)) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
}

/// Folds a patch matrix back onto one sample, accumulating overlaps.
fn col2im<T: Scalar>(col: &[T], g: &Geometry, x: &mut [T]) {
    let cols = g.cols();
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                let (lo, hi, ix0) = g.valid_cols(kx);
                for oy in 0..g.oh {
                    let Some(iy) = g.input_row(oy, ky) else {
                        continue;
                    };
                    let line = &src[oy * g.ow + lo..oy * g.ow + hi];
                    let dst = &mut plane[iy * g.w + ix0..(iy + 1) * g.w];
                    if g.stride == 1 {
                        for (d, &v) in dst.iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (i, &v) in line.iter().enumerate() {
                            dst[i * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

fn geometry<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>, oh: usize, ow: usize) -> Geometry {
    Geometry {
        c_in: x.channels(),
        h: x.height(),
        w: x.width(),
        k: p.kernel(),
        stride: p.stride,
        pad: p.padding,
        oh,
        ow,
    }
}

/// Cross-correlation of `x` with `p.weight`, plus bias.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let (oh, ow) = p.check_input(x)?;
    let g = geometry(x, p, oh, ow);
    let c_out = p.out_channels();
    let (rows, cols) = (g.rows(), g.cols());
    let in_per = g.c_in * g.h * g.w;
    let out_per = c_out * cols;
    let mut out = Tensor::zeros([x.batch(), c_out, oh, ow]);
    let mut col = if p.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * cols]
    };
    for n in 0..x.batch() {
        let xs = &x.data()[n * in_per..(n + 1) * in_per];
        let patches: &[T] = if p.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &mut col);
            &col
        };
        let dst = &mut out.data_mut()[n * out_per..(n + 1) * out_per];
        if let Some(b) = &p.bias {
            for (o, chunk) in dst.chunks_mut(cols).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b.data()[o]);
            }
        }
        T::gemm(
            c_out,
            rows,
            cols,
            T::one(),
            p.weight.data(),
            (rows as isize, 1),
            patches,
            (cols as isize, 1),
            T::one(),
            dst,
            (cols as isize, 1),
        );
    }
    Ok(out)
}

/// Gradients of `sum(grad_out * conv2d_forward(x, p))` with respect to the
/// input, the weights and the bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (oh, ow) = p.check_input(x)?;
    let c_out = p.out_channels();
    let expected = [x.batch(), c_out, oh, ow];
    if grad_out.dims() != expected {
        return Err(Error::config(format!(
            "conv grad_out {:?} does not match output {:?}",
            grad_out.dims(),
            expected
        )));
    }
    let g = geometry(x, p, oh, ow);
    let (rows, cols) = (g.rows(), g.cols());
    let in_per = g.c_in * g.h * g.w;
    let out_per = c_out * cols;

    let mut grad_x = Tensor::zeros(x.dims());
    let mut grad_w = Tensor::zeros(p.weight.dims());
    let mut grad_b = p.bias.as_ref().map(|_| vec![T::zero(); c_out]);
    let pointwise = p.is_pointwise();
    let mut col = vec![T::zero(); if pointwise { 0 } else { rows * cols }];
    let mut grad_col = vec![T::zero(); if pointwise { 0 } else { rows * cols }];

    for n in 0..x.batch() {
        let xs = &x.data()[n * in_per..(n + 1) * in_per];
        let gs = &grad_out.data()[n * out_per..(n + 1) * out_per];
        if let Some(gb) = grad_b.as_mut() {
            for (o, chunk) in gs.chunks(cols).enumerate() {
                gb[o] += chunk.iter().copied().sum::<T>();
            }
        }
        let patches: &[T] = if pointwise {
            xs
        } else {
            im2col(xs, &g, &mut col);
            &col
        };
        // dW += dY * patches^T
        T::gemm(
            c_out,
            cols,
            rows,
            T::one(),
            gs,
            (cols as isize, 1),
            patches,
            (1, cols as isize),
            T::one(),
            grad_w.data_mut(),
            (rows as isize, 1),
        );
        // dpatches = W^T * dY
        let gx = &mut grad_x.data_mut()[n * in_per..(n + 1) * in_per];
        if pointwise {
            T::gemm(
                rows,
                c_out,
                cols,
                T::one(),
                p.weight.data(),
                (1, rows as isize),
                gs,
                (cols as isize, 1),
                T::zero(),
                gx,
                (cols as isize, 1),
            );
        } else {
            T::gemm(
                rows,
                c_out,
                cols,
                T::one(),
                p.weight.data(),
                (1, rows as isize),
                gs,
                (cols as isize, 1),
                T::zero(),
                &mut grad_col,
                (cols as isize, 1),
            );
            col2im(&grad_col, &g, gx);
        }
    }
    Ok(ConvGrads {
        x: grad_x,
        weight: grad_w,
        bias: grad_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::{assert_close, numeric_grad, weighted_sum};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop cross-correlation.
    fn naive_conv(x: &Tensor<f64>, p: &ConvParams<f64>) -> Tensor<f64> {
        let [n, c_in, h, w] = x.dims();
        let [c_out, _, k, _] = p.weight.dims();
        let (s, pad) = (p.stride as isize, p.padding as isize);
        let oh = (h + 2 * p.padding - k) / p.stride + 1;
        let ow = (w + 2 * p.padding - k) / p.stride + 1;
        let mut out = Tensor::zeros([n, c_out, oh, ow]);
        for b in 0..n {
            for o in 0..c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = p.bias.as_ref().map_or(0.0, |bias| bias.data()[o]);
                        for c in 0..c_in {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = oy as isize * s + ky as isize - pad;
                                    let ix = ox as isize * s + kx as isize - pad;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x.at(b, c, iy as usize, ix as usize)
                                        * p.weight.at(o, c, ky, kx);
                                }
                            }
                        }
                        let i = out.index(b, o, oy, ox);
                        out.data_mut()[i] = acc;
                    }
                }
            }
        }
        out
    }

    fn random_params(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> ConvParams<f64> {
        ConvParams {
            weight: Tensor::uniform([c_out, c_in, k, k], -1.0, 1.0, rng),
            bias: Some(Tensor::uniform([c_out, 1, 1, 1], -1.0, 1.0, rng)),
            stride,
            padding: (k - 1) / 2,
        }
    }

    #[test]
    fn identity_pointwise_kernel() {
        let x = Tensor::<f32>::full([1, 1, 3, 3], 1.0);
        let mut p = ConvParams::zeros(1, 1, 1, 1, true);
        p.weight.data_mut()[0] = 1.0;
        let y = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn summation_kernel() {
        let x = Tensor::<f32>::full([1, 1, 3, 3], 1.0);
        let mut p = ConvParams::zeros(1, 1, 3, 1, true);
        p.padding = 0;
        p.weight.data_mut().iter_mut().for_each(|v| *v = 1.0);
        let y = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y.dims(), [1, 1, 1, 1]);
        assert_eq!(y.data()[0], 9.0);
    }

    #[test]
    fn strided_padded_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::uniform([2, 3, 8, 8], -1.0, 1.0, &mut rng);
        let p = random_params(3, 4, 3, 2, &mut rng);
        let fast = conv2d_forward(&x.cast::<f32>(), &cast_params(&p)).unwrap();
        let slow = naive_conv(&x, &p);
        assert_eq!(fast.dims(), [2, 4, 4, 4]);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((*a as f64 - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }

    fn cast_params(p: &ConvParams<f64>) -> ConvParams<f32> {
        ConvParams {
            weight: p.weight.cast(),
            bias: p.bias.as_ref().map(|b| b.cast()),
            stride: p.stride,
            padding: p.padding,
        }
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let p = ConvParams::<f32>::zeros(3, 1, 3, 1, false);
        let err = conv2d_forward(&x, &p).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 4, 4]") && err.contains("[1, 3, 3, 3]"), "{err}");
    }

    #[test]
    fn input_too_small_is_rejected() {
        let x = Tensor::<f32>::zeros([1, 1, 2, 2]);
        let mut p = ConvParams::<f32>::zeros(1, 1, 3, 1, false);
        p.padding = 0;
        assert!(matches!(conv2d_forward(&x, &p), Err(Error::Config(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f32>::uniform([1, 2, 5, 5], -1.0, 1.0, &mut rng);
        let p = cast_params(&random_params(2, 3, 3, 1, &mut rng));
        let g = conv2d_backward(&x, &p, &Tensor::zeros([1, 3, 5, 5])).unwrap();
        assert!(g.x.data().iter().all(|v| *v == 0.0));
        assert!(g.weight.data().iter().all(|v| *v == 0.0));
        assert!(g.bias.unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pointwise_backward_scales_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::uniform([1, 1, 3, 3], -1.0, 1.0, &mut rng);
        let mut p = ConvParams::<f32>::zeros(1, 1, 1, 1, true);
        p.weight.data_mut()[0] = 2.5;
        let go = Tensor::<f32>::uniform([1, 1, 3, 3], -1.0, 1.0, &mut rng);
        let g = conv2d_backward(&x, &p, &go).unwrap();
        for (a, b) in g.x.data().iter().zip(go.data()) {
            assert_eq!(*a, 2.5 * b);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for stride in [1, 2] {
            let x = Tensor::<f32>::uniform([1, 2, 5, 5], -1.0, 1.0, &mut rng);
            let p = cast_params(&random_params(2, 3, 3, stride, &mut rng));
            let y = conv2d_forward(&x, &p).unwrap();
            let weights: Vec<f32> = Tensor::<f32>::uniform(y.dims(), -1.0, 1.0, &mut rng).into_data();
            let go = Tensor::from_vec(y.dims(), weights.clone()).unwrap();
            let g = conv2d_backward(&x, &p, &go).unwrap();

            let num_x = numeric_grad(&x, 1e-3, |x| weighted_sum(&conv2d_forward(x, &p).unwrap(), &weights));
            assert_close(g.x.data(), &num_x, 1e-2, 1e-4);
            let num_w = numeric_grad(&p.weight, 1e-3, |w| {
                let q = ConvParams { weight: w.clone(), ..p.clone() };
                weighted_sum(&conv2d_forward(&x, &q).unwrap(), &weights)
            });
            assert_close(g.weight.data(), &num_w, 1e-2, 1e-4);
            let bias = p.bias.clone().unwrap();
            let num_b = numeric_grad(&bias, 1e-3, |b| {
                let q = ConvParams { bias: Some(b.clone()), ..p.clone() };
                weighted_sum(&conv2d_forward(&x, &q).unwrap(), &weights)
            });
            assert_close(&g.bias.unwrap(), &num_b, 1e-2, 1e-4);
        }
    }
}
