//! Seeded single-threaded training for [`ToyCnn`].
//!
//! Besides the clean images, every epoch sees one patch-masked copy of each
//! training image: a random subset of grid patches is kept and the rest is
//! replaced by a blurred copy. A masked positive stays positive only while at
//! least one of its target glyphs is fully kept. This teaches the network the
//! blurred-baseline perturbations used by the explanation methods.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::blur::gaussian_blur;
use super::cnn::{CnnArchitecture, Params, ToyCnn};
use super::dataset::{FeatureKind, Sample, SyntheticDataset, NEGATIVE, POSITIVE};
use super::Scorer;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::perturbation::{blend_pixels, PatchGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: usize,
    /// Add one patch-masked copy of each image per epoch.
    pub augment: bool,
    pub augment_grid: usize,
    pub augment_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch_size: 16,
            learning_rate: 4e-3,
            hidden: 32,
            augment: true,
            augment_grid: 7,
            augment_sigma: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub epochs: usize,
    pub steps: usize,
    /// Mean cross-entropy over the last epoch (`None` when no epoch ran).
    pub final_loss: Option<f64>,
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
}

/// Fraction of samples whose argmax class equals the label.
pub fn accuracy<S: Scorer + ?Sized>(scorer: &S, samples: &[Sample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let correct = samples
        .iter()
        .filter(|s| {
            let p = scorer.probabilities(&s.image);
            let best = p
                .iter()
                .enumerate()
                .fold(0, |best, (k, &v)| if v > p[best] { k } else { best });
            best == s.label
        })
        .count();
    correct as f64 / samples.len() as f64
}

struct Adam {
    m: Params,
    v: Params,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for t in 0..8 {
            for (((p, g), m), v) in params.tensors[t]
                .iter_mut()
                .zip(&grads.tensors[t])
                .zip(self.m.tensors[t].iter_mut())
                .zip(self.v.tensors[t].iter_mut())
            {
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Keeps a subset of patches and blurs the rest; returns the blended image
/// and its label. Nearly half of the variants keep a random subset, nearly
/// half keep the patches of one planted glyph plus a sparse random context,
/// and the rest keep nothing; some of those are flat images near the image
/// mean, the limit of ever stronger blur.
fn masked_variant(sample: &Sample, blurred: &Image, grid: &PatchGrid, rng: &mut ChaCha8Rng) -> (Image, usize) {
    let glyph_patches = |f: &super::dataset::PlantedFeature| -> Vec<usize> {
        f.pixels().into_iter().map(|(r, c)| grid.patch_of(r, c)).collect()
    };
    let mut kept: Vec<bool>;
    let branch: f64 = rng.random();
    if branch < 0.1 {
        let mean = sample.image.data().iter().sum::<f64>() / sample.image.data().len() as f64;
        let level = (mean * rng.random_range(0.5..1.5)).clamp(0.0, 1.0);
        return (Image::filled(sample.image.shape(), level).expect("level in [0, 1]"), NEGATIVE);
    }
    if branch < 0.15 {
        kept = vec![false; grid.patch_count()];
    } else if branch < 0.6 && !sample.features.is_empty() {
        let context: f64 = rng.random_range(0.0..0.3);
        kept = (0..grid.patch_count()).map(|_| rng.random::<f64>() < context).collect();
        let f = &sample.features[rng.random_range(0..sample.features.len())];
        for p in glyph_patches(f) {
            kept[p] = true;
        }
    } else {
        let keep_prob: f64 = rng.random();
        kept = (0..grid.patch_count()).map(|_| rng.random::<f64>() < keep_prob).collect();
    }
    let keep: Vec<f64> = grid
        .pixel_patches()
        .into_iter()
        .map(|p| if kept[p] { 1.0 } else { 0.0 })
        .collect();
    let image = blend_pixels(&sample.image, blurred, &keep);
    let target_survives = sample
        .features
        .iter()
        .filter(|f| f.kind == FeatureKind::Target)
        .any(|f| glyph_patches(f).into_iter().all(|p| kept[p]));
    let label = if sample.label == POSITIVE && target_survives { POSITIVE } else { NEGATIVE };
    (image, label)
}

/// Trains a [`ToyCnn`] on `dataset.train`; deterministic in `seed`.
pub fn train_toy(dataset: &SyntheticDataset, config: &TrainConfig, seed: u64) -> Result<(ToyCnn, TrainReport)> {
    if dataset.train.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    let classes = dataset.train.iter().map(|s| s.label).max().unwrap_or(0) + 1;
    if classes < 2 {
        return Err(Error::input("training set must contain at least 2 classes"));
    }
    let positive_rate = config.learning_rate > 0.0;
    if config.batch_size == 0 || !positive_rate {
        return Err(Error::input("batch size and learning rate must be positive"));
    }
    let shape = dataset.shape();
    let arch = CnnArchitecture {
        height: shape.height,
        width: shape.width,
        channels: shape.channels,
        hidden: config.hidden,
        classes: classes.max(dataset.class_count()),
        ..CnnArchitecture::default()
    };
    let init = ToyCnn::initialize(arch, seed)?;
    let mut params = init.params().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_7A1A);
    let mut adam = Adam { m: Params::zeros(&arch), v: Params::zeros(&arch), t: 0 };

    let grid = PatchGrid::new(config.augment_grid, config.augment_grid, shape.height, shape.width)?;
    let blurred: Vec<Image> = if config.augment && config.epochs > 0 {
        dataset
            .train
            .iter()
            .map(|s| gaussian_blur(&s.image, config.augment_sigma))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut steps = 0usize;
    let mut final_loss = None;
    for _epoch in 0..config.epochs {
        let mut examples: Vec<(Image, usize)> = dataset.train.iter().map(|s| (s.image.clone(), s.label)).collect();
        if config.augment {
            for (s, b) in dataset.train.iter().zip(&blurred) {
                examples.push(masked_variant(s, b, &grid, &mut rng));
            }
        }
        examples.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for batch in examples.chunks(config.batch_size) {
            let net = ToyCnn::from_params_unrounded(arch, params.clone());
            let mut grads = Params::zeros(&arch);
            let mut batch_loss = 0.0;
            for (image, label) in batch {
                let trace = net.forward(image);
                let p = &trace.probabilities;
                batch_loss -= p[*label].ln();
                let d_logits: Vec<f64> = p
                    .iter()
                    .enumerate()
                    .map(|(k, &pk)| (pk - f64::from(u8::from(k == *label))) / batch.len() as f64)
                    .collect();
                let (_, g) = net.backward(&trace, &d_logits, true);
                let g = g.expect("requested");
                for t in 0..8 {
                    for (a, b) in grads.tensors[t].iter_mut().zip(&g.tensors[t]) {
                        *a += b;
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Training { iteration: steps, loss: batch_loss });
            }
            epoch_loss += batch_loss;
            adam.step(&mut params, &grads, config.learning_rate);
            steps += 1;
        }
        final_loss = Some(epoch_loss / examples.len() as f64);
    }

    let model = ToyCnn::from_params(arch, params).map_err(|_| Error::Training { iteration: steps, loss: f64::NAN })?;
    let report = TrainReport {
        seed,
        epochs: config.epochs,
        steps,
        final_loss,
        train_accuracy: accuracy(&model, &dataset.train),
        heldout_accuracy: accuracy(&model, &dataset.heldout),
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DatasetConfig;

    fn tiny() -> SyntheticDataset {
        SyntheticDataset::generate(DatasetConfig { train_count: 24, heldout_count: 8, ..Default::default() }).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let ds = tiny();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let (model, report) = train_toy(&ds, &cfg, 3).unwrap();
        let arch = *model.architecture();
        assert_eq!(model, ToyCnn::initialize(arch, 3).unwrap());
        assert_eq!(report.steps, 0);
        assert!(report.final_loss.is_none());
    }

    #[test]
    fn same_seed_same_weights() {
        let ds = tiny();
        let cfg = TrainConfig { epochs: 1, ..Default::default() };
        let (a, _) = train_toy(&ds, &cfg, 5).unwrap();
        let (b, _) = train_toy(&ds, &cfg, 5).unwrap();
        assert_eq!(a, b);
        let (c, _) = train_toy(&ds, &cfg, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn divergence_is_reported_with_iteration() {
        let ds = tiny();
        let cfg = TrainConfig { epochs: 3, learning_rate: 1e300, augment: false, ..Default::default() };
        match train_toy(&ds, &cfg, 1) {
            Err(Error::Training { iteration, .. }) => assert!(iteration > 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn rejects_single_class_data() {
        let mut ds = tiny();
        ds.train.retain(|s| s.label == NEGATIVE);
        assert!(train_toy(&ds, &TrainConfig::default(), 1).is_err());
    }
}
