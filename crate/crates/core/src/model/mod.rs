//! Scorer abstraction plus the bundled toy classifier, synthetic data and
//! baseline construction.

mod blur;
mod cnn;
mod dataset;
pub mod file;
mod train;

pub use blur::{blur_baseline, Baseline, gaussian_blur, BaselineConfig, MAX_SIGMA_DOUBLINGS};
pub use cnn::{CnnArchitecture, ForwardTrace, ToyCnn};
pub use dataset::{DatasetConfig, NEGATIVE, POSITIVE, FeatureKind, PlantedFeature, Sample, SyntheticDataset};
pub use train::{accuracy, train_toy, TrainConfig, TrainReport};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Capability {
    ForwardOnly,
    GradientCapable,
}

/// A classifier that maps an image to a probability vector.
///
/// Implementations receive images that already match `input_shape`; the free
/// functions [`score`], [`probabilities`] and [`input_gradient`] do the
/// validation. Scorers are immutable and shared across worker threads.
pub trait Scorer: Send + Sync {
    fn class_count(&self) -> usize;

    fn input_shape(&self) -> Shape;

    fn capability(&self) -> Capability {
        Capability::ForwardOnly
    }

    fn probabilities(&self, image: &Image) -> Vec<f64>;

    /// `f_c(image)` together with `∂f_c/∂image`, laid out like the image data.
    fn probability_gradient(&self, _image: &Image, _class_index: usize) -> Result<(f64, Vec<f64>)> {
        Err(Error::Capability)
    }
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn class_count(&self) -> usize {
        (**self).class_count()
    }
    fn input_shape(&self) -> Shape {
        (**self).input_shape()
    }
    fn capability(&self) -> Capability {
        (**self).capability()
    }
    fn probabilities(&self, image: &Image) -> Vec<f64> {
        (**self).probabilities(image)
    }
    fn probability_gradient(&self, image: &Image, class_index: usize) -> Result<(f64, Vec<f64>)> {
        (**self).probability_gradient(image, class_index)
    }
}

impl<S: Scorer + ?Sized> Scorer for std::sync::Arc<S> {
    fn class_count(&self) -> usize {
        (**self).class_count()
    }
    fn input_shape(&self) -> Shape {
        (**self).input_shape()
    }
    fn capability(&self) -> Capability {
        (**self).capability()
    }
    fn probabilities(&self, image: &Image) -> Vec<f64> {
        (**self).probabilities(image)
    }
    fn probability_gradient(&self, image: &Image, class_index: usize) -> Result<(f64, Vec<f64>)> {
        (**self).probability_gradient(image, class_index)
    }
}

pub(crate) fn check_input<S: Scorer + ?Sized>(scorer: &S, image: &Image, class_index: usize) -> Result<()> {
    if image.shape() != scorer.input_shape() {
        return Err(Error::input(format!(
            "image shape {} does not match scorer input {}",
            image.shape(),
            scorer.input_shape()
        )));
    }
    if class_index >= scorer.class_count() {
        return Err(Error::input(format!(
            "class index {class_index} out of range for {} classes",
            scorer.class_count()
        )));
    }
    Ok(())
}

/// Full probability vector for `image`.
pub fn probabilities<S: Scorer + ?Sized>(scorer: &S, image: &Image) -> Result<Vec<f64>> {
    check_input(scorer, image, 0)?;
    Ok(scorer.probabilities(image))
}

/// `f_c(image)`.
pub fn score<S: Scorer + ?Sized>(scorer: &S, image: &Image, class_index: usize) -> Result<f64> {
    check_input(scorer, image, class_index)?;
    Ok(scorer.probabilities(image)[class_index])
}

/// `∂f_c/∂image` evaluated at `image`.
pub fn input_gradient<S: Scorer + ?Sized>(scorer: &S, image: &Image, class_index: usize) -> Result<Vec<f64>> {
    check_input(scorer, image, class_index)?;
    if scorer.capability() != Capability::GradientCapable {
        return Err(Error::Capability);
    }
    Ok(scorer.probability_gradient(image, class_index)?.1)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `softmax(W·x + b)` over the flattened image. Mostly useful as a test
/// double whose Jacobian is known in closed form.
#[derive(Debug, Clone)]
pub struct LinearScorer {
    shape: Shape,
    /// `class_count × shape.len()`, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl LinearScorer {
    pub fn new(shape: Shape, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if bias.is_empty() || weights.len() != bias.len() * shape.len() {
            return Err(Error::input("linear scorer weights must be class_count × input length"));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::input("linear scorer parameters must be finite"));
        }
        Ok(LinearScorer { shape, weights, bias })
    }

    pub fn logits(&self, image: &Image) -> Vec<f64> {
        let n = self.shape.len();
        self.bias
            .iter()
            .enumerate()
            .map(|(k, b)| {
                let row = &self.weights[k * n..(k + 1) * n];
                b + row.iter().zip(image.data()).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect()
    }

    pub fn weights_for(&self, class_index: usize) -> &[f64] {
        let n = self.shape.len();
        &self.weights[class_index * n..(class_index + 1) * n]
    }
}

impl Scorer for LinearScorer {
    fn class_count(&self) -> usize {
        self.bias.len()
    }

    fn input_shape(&self) -> Shape {
        self.shape
    }

    fn capability(&self) -> Capability {
        Capability::GradientCapable
    }

    fn probabilities(&self, image: &Image) -> Vec<f64> {
        softmax(&self.logits(image))
    }

    fn probability_gradient(&self, image: &Image, class_index: usize) -> Result<(f64, Vec<f64>)> {
        let p = self.probabilities(image);
        let n = self.shape.len();
        // ∂p_c/∂x = p_c · (W_c − Σ_k p_k W_k)
        let mut grad = self.weights_for(class_index).to_vec();
        for (k, &pk) in p.iter().enumerate() {
            let row = &self.weights[k * n..(k + 1) * n];
            for (g, w) in grad.iter_mut().zip(row) {
                *g -= pk * w;
            }
        }
        let pc = p[class_index];
        for g in &mut grad {
            *g *= pc;
        }
        Ok((pc, grad))
    }
}
