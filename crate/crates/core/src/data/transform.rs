use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::Sample;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Per-channel affine normalization constants.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: IMAGENET_MEAN.to_vec(),
            std: IMAGENET_STD.to_vec(),
        }
    }
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    fn check(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::config(format!(
                "normalization has {} means and {} stds for {channels} channels",
                self.mean.len(),
                self.std.len()
            )));
        }
        if let Some(s) = self.std.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::config(format!("normalization std {s} must be positive")));
        }
        Ok(())
    }
}

fn per_channel<T: Scalar>(
    image: &Tensor<T>,
    norm: &Normalization,
    f: impl Fn(f64, f64, f64) -> f64,
) -> Result<Tensor<T>> {
    norm.check(image.channels())?;
    let [n, c, h, w] = image.dims();
    let mut out = image.clone();
    let plane = h * w;
    for b in 0..n {
        for ch in 0..c {
            let start = (b * c + ch) * plane;
            for v in &mut out.data_mut()[start..start + plane] {
                *v = T::from_f64_lossy(f(v.to_f64_lossy(), norm.mean[ch], norm.std[ch]));
            }
        }
    }
    Ok(out)
}

/// `(x - mean) / std` per channel.
pub fn normalize<T: Scalar>(image: &Tensor<T>, norm: &Normalization) -> Result<Tensor<T>> {
    per_channel(image, norm, |x, m, s| (x - m) / s)
}

/// Inverse of [`normalize`].
pub fn denormalize<T: Scalar>(image: &Tensor<T>, norm: &Normalization) -> Result<Tensor<T>> {
    per_channel(image, norm, |x, m, s| x * s + m)
}

/// Bilinear resampling with the pixel-center convention: output pixel `i`
/// samples source coordinate `(i + 0.5) * in / out - 0.5`, clamped to the
/// image.
pub fn resize_bilinear<T: Scalar>(image: &Tensor<T>, target: (usize, usize)) -> Result<Tensor<T>> {
    let [n, c, h, w] = image.dims();
    let (th, tw) = target;
    if th == 0 || tw == 0 || h == 0 || w == 0 {
        return Err(Error::config(format!(
            "cannot resize {h}x{w} to {th}x{tw}"
        )));
    }
    if (th, tw) == (h, w) {
        return Ok(image.clone());
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let rows = taps(th, h);
    let cols = taps(tw, w);
    let mut out = Tensor::zeros([n, c, th, tw]);
    let src = image.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let d = &mut dst[plane * th * tw..(plane + 1) * th * tw];
        for (i, &(y0, y1, fy)) in rows.iter().enumerate() {
            for (j, &(x0, x1, fx)) in cols.iter().enumerate() {
                let at = |y: usize, x: usize| s[y * w + x].to_f64_lossy();
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                d[i * tw + j] = T::from_f64_lossy(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Ok(out)
}

fn remap<T: Scalar>(
    image: &Tensor<T>,
    out_hw: (usize, usize),
    source: impl Fn(usize, usize) -> (usize, usize),
) -> Tensor<T> {
    let [n, c, h, w] = image.dims();
    let (oh, ow) = out_hw;
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let src = image.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        for i in 0..oh {
            for j in 0..ow {
                let (y, x) = source(i, j);
                dst[plane * oh * ow + i * ow + j] = src[plane * h * w + y * w + x];
            }
        }
    }
    out
}

/// Mirror left to right.
pub fn hflip<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (image.height(), image.width());
    remap(image, (h, w), |i, j| (i, w - 1 - j))
}

/// Mirror top to bottom.
pub fn vflip<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (image.height(), image.width());
    remap(image, (h, w), |i, j| (h - 1 - i, j))
}

/// Rotate 90° counter-clockwise `quarter_turns` times. Non-square images
/// swap height and width on odd turns.
pub fn rot90<T: Scalar>(image: &Tensor<T>, quarter_turns: usize) -> Tensor<T> {
    let mut out = image.clone();
    for _ in 0..quarter_turns % 4 {
        let (h, w) = (out.height(), out.width());
        out = remap(&out, (w, h), |i, j| (j, w - 1 - i));
    }
    out
}

/// The six training variants of a sample: original, horizontal flip,
/// vertical flip, and rotations by 90°, 180° and 270°.
pub fn augment<T: Scalar>(sample: &Sample<T>) -> Vec<Sample<T>> {
    let img = &sample.image;
    [
        img.clone(),
        hflip(img),
        vflip(img),
        rot90(img, 1),
        rot90(img, 2),
        rot90(img, 3),
    ]
    .into_iter()
    .map(|image| Sample {
        image,
        label: sample.label,
        source_path: sample.source_path.clone(),
        fold: sample.fold,
    })
    .collect()
}
