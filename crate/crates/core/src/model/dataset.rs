//! Seeded synthetic grayscale corpus with redundant class evidence.
//!
//! Every positive image carries two copies of the target glyph (a plus sign)
//! at spatially disjoint locations; negatives carry the distractor glyph (a
//! hollow square) instead. Either target alone identifies the class, so
//! positives admit more than one sufficient explanation by construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Shape};

pub const NEGATIVE: usize = 0;
pub const POSITIVE: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Target,
    Distractor,
}

impl FeatureKind {
    /// Lit pixel offsets inside a `size×size` box.
    pub fn offsets(self, size: usize) -> Vec<(usize, usize)> {
        let mid = size / 2;
        let mut px = Vec::new();
        for r in 0..size {
            for c in 0..size {
                let lit = match self {
                    FeatureKind::Target => r == mid || c == mid,
                    FeatureKind::Distractor => r == 0 || c == 0 || r == size - 1 || c == size - 1,
                };
                if lit {
                    px.push((r, c));
                }
            }
        }
        px
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedFeature {
    pub kind: FeatureKind,
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

impl PlantedFeature {
    /// Absolute `(row, col)` of every lit pixel.
    pub fn pixels(&self) -> Vec<(usize, usize)> {
        self.kind
            .offsets(self.size)
            .into_iter()
            .map(|(r, c)| (self.row + r, self.col + c))
            .collect()
    }

    fn separated_from(&self, other: &PlantedFeature, gap: usize) -> bool {
        self.row >= other.row + other.size + gap
            || other.row >= self.row + self.size + gap
            || self.col >= other.col + other.size + gap
            || other.col >= self.col + self.size + gap
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
    pub features: Vec<PlantedFeature>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub image_size: usize,
    pub feature_size: usize,
    /// Minimum pixel gap between planted glyphs.
    pub feature_gap: usize,
    pub train_count: usize,
    pub heldout_count: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            image_size: 32,
            feature_size: 5,
            feature_gap: 5,
            train_count: 800,
            heldout_count: 200,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub config: DatasetConfig,
    pub train: Vec<Sample>,
    pub heldout: Vec<Sample>,
}

impl SyntheticDataset {
    pub fn generate(config: DatasetConfig) -> Result<Self> {
        if config.feature_size < 3 || config.image_size < 2 * config.feature_size + config.feature_gap {
            return Err(Error::input("image too small to hold two separated glyphs"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut make = |n: usize| -> Vec<Sample> {
            (0..n)
                .map(|i| {
                    let label = if i % 2 == 0 { POSITIVE } else { NEGATIVE };
                    render_sample(&config, label, &mut rng)
                })
                .collect()
        };
        let train = make(config.train_count);
        let heldout = make(config.heldout_count);
        Ok(SyntheticDataset { config, train, heldout })
    }

    pub fn class_count(&self) -> usize {
        2
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.config.image_size, self.config.image_size, 1)
    }

    pub fn heldout_positives(&self) -> impl Iterator<Item = &Sample> {
        self.heldout.iter().filter(|s| s.label == POSITIVE)
    }
}

fn render_sample(config: &DatasetConfig, label: usize, rng: &mut ChaCha8Rng) -> Sample {
    let n = config.image_size;
    let shape = Shape::new(n, n, 1);
    let level = rng.random_range(0.15..0.35);
    let mut data: Vec<f64> = (0..n * n).map(|_| level + rng.random_range(-0.05..0.05)).collect();

    let kind = if label == POSITIVE { FeatureKind::Target } else { FeatureKind::Distractor };
    let mut features: Vec<PlantedFeature> = Vec::with_capacity(2);
    while features.len() < 2 {
        let f = PlantedFeature {
            kind,
            row: rng.random_range(0..=n - config.feature_size),
            col: rng.random_range(0..=n - config.feature_size),
            size: config.feature_size,
        };
        if features.iter().all(|g| f.separated_from(g, config.feature_gap)) {
            features.push(f);
        }
    }
    for f in &features {
        let brightness = rng.random_range(0.8..1.0);
        for (r, c) in f.pixels() {
            data[r * n + c] = brightness;
        }
    }
    let image = Image::from_clamped(shape, data).expect("finite by construction");
    Sample { image, label, features }
}
