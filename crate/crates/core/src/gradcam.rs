//! Gradient-weighted class activation maps over the final feature maps.

use std::io::Cursor;
use std::path::Path;

use crate::data::resize_bilinear;
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::graph::{predict, Network};
use crate::scalar::Scalar;
use crate::tensor::{concat_backward, linear_backward, linear_forward, LinearParams, Mode, Tensor};

/// Non-negative `height x width` grid, max-normalized unless all zero.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub target_class: usize,
}

impl AttentionMap {
    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    /// Bilinear upsampling to `(height, width)`.
    pub fn upsample(&self, height: usize, width: usize) -> Result<Vec<f64>> {
        let t = Tensor::<f64>::from_vec([1, 1, self.height, self.width], self.values.clone())?;
        Ok(resize_bilinear(&t, (height, width))?.into_data())
    }
}

/// `ReLU(sum_k alpha_k A_k)` with `alpha_k` the spatial mean of the gradient
/// on channel `k`, scaled so the maximum is one.
pub fn cam_from_gradients<T: Scalar>(
    activations: &Tensor<T>,
    gradients: &Tensor<T>,
    target_class: usize,
) -> Result<AttentionMap> {
    let [n, k, h, w] = activations.dims();
    if n != 1 || gradients.dims() != activations.dims() {
        return Err(Error::config(format!(
            "need one sample with matching gradients, got {:?} and {:?}",
            activations.dims(),
            gradients.dims()
        )));
    }
    let plane = h * w;
    let mut values = vec![0.0f64; plane];
    for c in 0..k {
        let g = &gradients.data()[c * plane..(c + 1) * plane];
        let alpha = g.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / plane as f64;
        let a = &activations.data()[c * plane..(c + 1) * plane];
        for (out, v) in values.iter_mut().zip(a) {
            *out += alpha * v.to_f64_lossy();
        }
    }
    values.iter_mut().for_each(|v| *v = v.max(0.0));
    let max = values.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v /= max);
    }
    Ok(AttentionMap {
        values,
        height: h,
        width: w,
        target_class,
    })
}

/// Gradient of logit `target` (or the arg-max logit) with respect to
/// `features`, for a linear head applied directly to the flattened features.
/// Returns the resolved target class and the gradient.
pub fn head_gradient<T: Scalar>(
    features: &Tensor<T>,
    head: &LinearParams<T>,
    target: Option<usize>,
) -> Result<(usize, Tensor<T>)> {
    let classes = head.outputs();
    let target = match target {
        Some(c) if c >= classes => {
            return Err(Error::input(format!(
                "target class {c} out of range for {classes} classes"
            )))
        }
        Some(c) => c,
        None => predict(linear_forward(features, head)?.data()).0,
    };
    let mut onehot = Tensor::zeros([1, classes, 1, 1]);
    onehot.data_mut()[target] = T::one();
    Ok((target, linear_backward(features, head, &onehot)?.x))
}

/// Attention over the final concatenated feature maps for one normalized
/// `(1, C, H, W)` image.
pub fn grad_cam<T: Scalar>(
    net: &Network<T>,
    image: &Tensor<T>,
    target: Option<usize>,
) -> Result<AttentionMap> {
    let (features, target, grad) = features_and_gradient(net, image, target)?;
    cam_from_gradients(&features, &grad, target)
}

/// Separate maps for the dense, residual and plain channel groups.
pub fn branch_cams<T: Scalar>(
    net: &Network<T>,
    image: &Tensor<T>,
    target: Option<usize>,
) -> Result<[AttentionMap; 3]> {
    let (features, target, grad) = features_and_gradient(net, image, target)?;
    let split = net.config().final_channels();
    let a = concat_backward(&features, &split)?;
    let g = concat_backward(&grad, &split)?;
    Ok([
        cam_from_gradients(&a[0], &g[0], target)?,
        cam_from_gradients(&a[1], &g[1], target)?,
        cam_from_gradients(&a[2], &g[2], target)?,
    ])
}

fn features_and_gradient<T: Scalar>(
    net: &Network<T>,
    image: &Tensor<T>,
    target: Option<usize>,
) -> Result<(Tensor<T>, usize, Tensor<T>)> {
    if image.batch() != 1 {
        return Err(Error::input(format!(
            "attention maps take one image, got a batch of {}",
            image.batch()
        )));
    }
    let pass = net.forward(image, Mode::Inference)?;
    let (target, grad) = head_gradient(pass.features(), &net.head, target)?;
    Ok((pass.features().clone(), target, grad))
}

/// Monotone black-red-yellow-white ramp; 0 maps to black.
pub fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [
        (3.0 * v).min(1.0),
        (3.0 * v - 1.0).clamp(0.0, 1.0),
        (3.0 * v - 2.0).clamp(0.0, 1.0),
    ]
}

/// Blends the channel mean of `base` (values in `[0, 1]`) with the colored,
/// upsampled map: `0.5 * base + 0.5 * colormap(map)`. Returns interleaved RGB
/// in `[0, 1]`.
pub fn blend<T: Scalar>(map: &AttentionMap, base: &Tensor<T>) -> Result<Vec<f64>> {
    let [n, c, h, w] = base.dims();
    if n != 1 || c == 0 {
        return Err(Error::input(format!("base image must be (1, C, H, W), got {:?}", base.dims())));
    }
    let up = map.upsample(h, w)?;
    let plane = h * w;
    let mut out = Vec::with_capacity(3 * plane);
    for (i, m) in up.iter().enumerate() {
        let gray = (0..c)
            .map(|ch| base.data()[ch * plane + i].to_f64_lossy())
            .sum::<f64>()
            / c as f64;
        for color in colormap(*m) {
            out.push(0.5 * gray.clamp(0.0, 1.0) + 0.5 * color);
        }
    }
    Ok(out)
}

/// Writes the blended overlay as an 8-bit RGB PNG of the base image's size.
pub fn render_heatmap<T: Scalar>(map: &AttentionMap, base: &Tensor<T>, out: &Path) -> Result<()> {
    let rgb = blend(map, base)?;
    let (h, w) = (base.height(), base.width());
    let bytes: Vec<u8> = rgb.iter().map(|v| (v * 255.0).round() as u8).collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches dims");
    let mut png = Cursor::new(Vec::new());
    img.write_to(&mut png, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: out.to_path_buf(),
            reason: e.to_string(),
        })?;
    atomic_write(out, png.get_ref())
}
