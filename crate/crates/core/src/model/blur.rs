use serde::{Deserialize, Serialize};

use super::{score, Scorer};
use crate::error::{Error, Result};
use crate::image::Image;

pub const MAX_SIGMA_DOUBLINGS: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub sigma: f64,
    /// Largest acceptable class confidence on the blurred image.
    pub epsilon: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { sigma: 5.0, epsilon: 0.05 }
    }
}

/// A blurred baseline that passed the confidence check.
#[derive(Debug, Clone, PartialEq)]
pub struct Baseline {
    pub image: Image,
    /// Sigma actually used after escalation.
    pub sigma: f64,
    pub confidence: f64,
}

/// Mirror index into `[0, n)` with the edge sample repeated (`-1 → 0`, `n → n-1`),
/// folding repeatedly for offsets larger than the axis.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

fn kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with kernel radius `⌈3σ⌉` and reflected borders.
pub fn gaussian_blur(image: &Image, sigma: f64) -> Result<Image> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::input(format!("blur sigma must be positive, got {sigma}")));
    }
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let k = kernel(sigma);
    let radius = (k.len() / 2) as isize;
    let src = image.data();

    let mut rows = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (j, &kv) in k.iter().enumerate() {
                    let xx = reflect(x as isize + j as isize - radius, w);
                    acc += kv * src[(y * w + xx) * c + ch];
                }
                rows[(y * w + x) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (j, &kv) in k.iter().enumerate() {
                    let yy = reflect(y as isize + j as isize - radius, h);
                    acc += kv * rows[(yy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = acc;
            }
        }
    }
    // Convex combinations of [0,1] values; clamping only absorbs rounding.
    Image::from_clamped(image.shape(), out)
}

/// Blurs `image` until the scorer's confidence for `class_index` is at most
/// `epsilon`, doubling sigma up to [`MAX_SIGMA_DOUBLINGS`] times.
pub fn blur_baseline<S: Scorer + ?Sized>(
    scorer: &S,
    image: &Image,
    class_index: usize,
    config: BaselineConfig,
) -> Result<Baseline> {
    if !(config.epsilon > 0.0 && config.epsilon <= 1.0) {
        return Err(Error::input(format!("epsilon must be in (0, 1], got {}", config.epsilon)));
    }
    let mut sigma = config.sigma;
    let mut last = 0.0;
    for _ in 0..=MAX_SIGMA_DOUBLINGS {
        let blurred = gaussian_blur(image, sigma)?;
        let confidence = score(scorer, &blurred, class_index)?;
        if confidence <= config.epsilon {
            assert!(confidence <= config.epsilon);
            return Ok(Baseline { image: blurred, sigma, confidence });
        }
        last = confidence;
        sigma *= 2.0;
    }
    Err(Error::BaselineFailure { confidence: last, epsilon: config.epsilon, sigma: sigma / 2.0 })
}
