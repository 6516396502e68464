use crate::error::{Error, Result};
use crate::image::{Image, Shape};
use crate::model::{Capability, Scorer};
use crate::perturbation::PatchGrid;

/// Synthetic scorer with known MSEs, for testing searches.
///
/// Works on images whose patches are either fully on (mean > ½) or off. The
/// class-1 probability is `high` when every patch of some clause is on;
/// otherwise it grows with the best clause's coverage and a small per-patch
/// term but stays below `ceiling`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedOracle {
    grid: PatchGrid,
    clauses: Vec<Vec<usize>>,
    high: f64,
    ceiling: f64,
}

impl PlantedOracle {
    pub fn new(grid: PatchGrid, clauses: Vec<Vec<usize>>) -> Result<Self> {
        let n = grid.patch_count();
        if clauses.iter().flatten().any(|&p| p >= n) {
            return Err(Error::input("clause patch out of range"));
        }
        Ok(PlantedOracle { grid, clauses, high: 0.95, ceiling: 0.8 })
    }

    /// The all-on image; the matching baseline is all zeros.
    pub fn image(&self) -> Image {
        Image::filled(self.input_shape(), 1.0).expect("valid shape")
    }

    pub fn baseline(&self) -> Image {
        Image::filled(self.input_shape(), 0.0).expect("valid shape")
    }

    pub fn grid(&self) -> PatchGrid {
        self.grid
    }

    pub fn clauses(&self) -> &[Vec<usize>] {
        &self.clauses
    }

    fn on_patches(&self, image: &Image) -> Vec<bool> {
        let lum = image.luminance();
        self.grid.pool_mean(&lum).into_iter().map(|m| m > 0.5).collect()
    }

    fn confidence(&self, on: &[bool]) -> f64 {
        if self.clauses.iter().any(|c| c.iter().all(|&p| on[p])) {
            return self.high;
        }
        let coverage = self
            .clauses
            .iter()
            .filter(|c| !c.is_empty())
            .map(|c| c.iter().filter(|&&p| on[p]).count() as f64 / c.len() as f64)
            .fold(0.0, f64::max);
        let n = on.len() as f64;
        // Distinct per-patch weights keep beam rankings free of ties.
        let spread: f64 = on.iter().enumerate().filter(|(_, &o)| o).map(|(p, _)| (p + 1) as f64).sum::<f64>()
            / (n * (n + 1.0) / 2.0);
        0.02 + (self.ceiling - 0.1) * coverage + 0.05 * spread
    }
}

impl Scorer for PlantedOracle {
    fn class_count(&self) -> usize {
        2
    }

    fn input_shape(&self) -> Shape {
        Shape::new(self.grid.height, self.grid.width, 1)
    }

    fn capability(&self) -> Capability {
        Capability::ForwardOnly
    }

    fn probabilities(&self, image: &Image) -> Vec<f64> {
        let p = self.confidence(&self.on_patches(image));
        vec![1.0 - p, p]
    }
}
