use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

const NOISE_STD: f64 = 0.1;
const AMPLITUDE: f64 = 0.35;
const PHASE_JITTER: f64 = 0.25;
const ANGLE_JITTER: f64 = 0.05;

/// Grating frequency (cycles across the image) and orientation of a class.
fn class_pattern(class: usize, classes: usize) -> (f64, f64) {
    let freq = 3.0 + 3.0 * (class % 8) as f64;
    let angle = PI / 8.0 + PI * class as f64 / (classes + 1) as f64;
    (freq, angle)
}

/// Writes `root/class_XX/img_YYYY.png`: 8-bit grayscale sinusoidal gratings
/// whose frequency and orientation depend on the class, with a small seeded
/// phase and angle jitter and additive Gaussian noise.
pub fn make_synthetic(
    root: &Path,
    classes: usize,
    per_class: usize,
    dims: (usize, usize),
    seed: u64,
) -> Result<()> {
    if classes < 2 {
        return Err(Error::config(format!("need at least 2 classes, got {classes}")));
    }
    if per_class == 0 || dims.0 == 0 || dims.1 == 0 {
        return Err(Error::config("per-class count and image dims must be positive"));
    }
    let (h, w) = dims;
    let noise = Normal::new(0.0, NOISE_STD).expect("finite noise std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = classes.saturating_sub(1).to_string().len().max(2);
    for class in 0..classes {
        let dir = root.join(format!("class_{class:0width$}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let (freq, angle) = class_pattern(class, classes);
        for i in 0..per_class {
            let phase = rng.random_range(-PHASE_JITTER..PHASE_JITTER);
            let theta = angle + rng.random_range(-ANGLE_JITTER..ANGLE_JITTER);
            let (dx, dy) = (theta.cos(), theta.sin());
            let mut pixels = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    let u = (x as f64 * dx + y as f64 * dy) / w as f64;
                    let v = 0.5
                        + AMPLITUDE * (2.0 * PI * freq * u + phase).sin()
                        + noise.sample(&mut rng);
                    pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
            let path = dir.join(format!("img_{i:04}.png"));
            let img = image::GrayImage::from_raw(w as u32, h as u32, pixels)
                .expect("buffer matches dims");
            img.save(&path).map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(&path, io),
                other => Error::Image {
                    path: path.clone(),
                    reason: other.to_string(),
                },
            })?;
        }
    }
    Ok(())
}
