//! Deletion and insertion curves.
//!
//! Pixels are ranked by heatmap importance (highest first, ties broken in
//! raster order). The deletion curve starts from the image and replaces the
//! top-ranked pixels with baseline pixels; the insertion curve starts from the
//! baseline and restores them. Each curve is summarised by the trapezoidal
//! area under it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{check_input, Scorer};
use crate::perturbation::{blend_pixels, upsample, Mask};

pub const DEFAULT_STEPS: usize = 49;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    /// Fraction of pixels removed (deletion) or inserted (insertion), from 0 to 1.
    pub fractions: Vec<f64>,
    pub confidences: Vec<f64>,
    pub auc: f64,
}

impl Curve {
    pub fn new(fractions: Vec<f64>, confidences: Vec<f64>) -> Result<Self> {
        if fractions.len() != confidences.len() {
            return Err(Error::input("curve needs one confidence per fraction"));
        }
        let area = trapezoid(&fractions, &confidences)?;
        Ok(Curve { fractions, confidences, auc: area })
    }

    pub fn len(&self) -> usize {
        self.fractions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fractions.is_empty()
    }
}

fn trapezoid(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() < 2 {
        return Err(Error::input("a curve needs at least 2 points"));
    }
    if x.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::input("curve fractions must be non-decreasing"));
    }
    // Anchored at y₀ so a constant curve integrates to exactly y₀·(xₙ − x₀).
    let y0 = y[0];
    let rest: f64 = x
        .windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| (xs[1] - xs[0]) * ((ys[0] + ys[1]) / 2.0 - y0))
        .sum();
    Ok(y0 * (x[x.len() - 1] - x[0]) + rest)
}

/// Trapezoidal area under `curve`.
pub fn auc(curve: &Curve) -> Result<f64> {
    trapezoid(&curve.fractions, &curve.confidences)
}

/// Pixel indices sorted by importance, highest first; equal importances keep raster order.
pub fn rank_pixels(importance: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..importance.len()).collect();
    order.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
    order
}

/// Uniform-random importance map, one value per pixel.
pub fn random_heatmap(height: usize, width: usize, seed: u64) -> Mask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..height * width).map(|_| rng.random::<f64>()).collect();
    Mask::new(height, width, values).expect("values in [0, 1)")
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Direction {
    Deletion,
    Insertion,
}

fn curve<S: Scorer + ?Sized>(
    scorer: &S,
    image: &Image,
    heatmap: &Mask,
    class_index: usize,
    steps: usize,
    baseline: &Image,
    direction: Direction,
) -> Result<Curve> {
    check_input(scorer, image, class_index)?;
    image.ensure_same_shape(baseline)?;
    if steps < 2 {
        return Err(Error::input("a curve needs at least 2 steps"));
    }
    let (h, w) = (image.height(), image.width());
    let dense = if heatmap.rows() == h && heatmap.cols() == w {
        heatmap.clone()
    } else {
        upsample(heatmap, h, w)?
    };
    let order = rank_pixels(dense.values());
    let n = h * w;

    let counts: Vec<usize> = (0..=steps).map(|k| (k * n).div_ceil(steps)).collect();
    let confidences: Vec<f64> = counts
        .par_iter()
        .map(|&count| {
            // keep = 1 → original pixel
            let (head, tail) = match direction {
                Direction::Deletion => (0.0, 1.0),
                Direction::Insertion => (1.0, 0.0),
            };
            let mut keep = vec![tail; n];
            for &p in &order[..count] {
                keep[p] = head;
            }
            let perturbed = blend_pixels(image, baseline, &keep);
            scorer.probabilities(&perturbed)[class_index]
        })
        .collect();
    let fractions = counts.iter().map(|&c| c as f64 / n as f64).collect();
    Curve::new(fractions, confidences)
}

/// Confidence as the most important pixels are progressively replaced by the baseline.
pub fn deletion_curve<S: Scorer + ?Sized>(
    scorer: &S,
    image: &Image,
    heatmap: &Mask,
    class_index: usize,
    steps: usize,
    baseline: &Image,
) -> Result<Curve> {
    curve(scorer, image, heatmap, class_index, steps, baseline, Direction::Deletion)
}

/// Confidence as the most important pixels are progressively restored onto the baseline.
pub fn insertion_curve<S: Scorer + ?Sized>(
    scorer: &S,
    image: &Image,
    heatmap: &Mask,
    class_index: usize,
    steps: usize,
    baseline: &Image,
) -> Result<Curve> {
    curve(scorer, image, heatmap, class_index, steps, baseline, Direction::Insertion)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Shape;
    use crate::model::{score, LinearScorer};

    fn scorer_and_images() -> (LinearScorer, Image, Image) {
        let shape = Shape::new(3, 4, 1);
        let w: Vec<f64> = (0..12).map(|i| i as f64 / 4.0).collect();
        let mut weights = w.clone();
        weights.extend(w.iter().map(|v| -v));
        let s = LinearScorer::new(shape, weights, vec![0.0, 0.0]).unwrap();
        let img = Image::new(shape, (0..12).map(|i| ((i * 5) % 12) as f64 / 11.0).collect()).unwrap();
        let base = Image::filled(shape, 0.2).unwrap();
        (s, img, base)
    }

    #[test]
    fn auc_identities() {
        let flat = Curve::new(vec![0.0, 0.25, 1.0], vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(auc(&flat).unwrap(), 1.0);
        let ramp = Curve::new(vec![0.0, 0.5, 1.0], vec![1.0, 0.5, 0.0]).unwrap();
        assert!((auc(&ramp).unwrap() - 0.5).abs() < 1e-12);
        let xs: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| if x <= 0.5 { 1.0 } else { 0.0 }).collect();
        let step = Curve::new(xs, ys).unwrap();
        // The drop is spread over one interval of width 0.1.
        assert!((step.auc - 0.55).abs() < 1e-12);
        assert!(Curve::new(vec![0.0], vec![1.0]).is_err());
    }

    #[test]
    fn identical_image_and_baseline_gives_flat_curves() {
        let (s, img, _) = scorer_and_images();
        let heat = random_heatmap(3, 4, 1);
        let f = score(&s, &img, 0).unwrap();
        for c in [
            deletion_curve(&s, &img, &heat, 0, 5, &img).unwrap(),
            insertion_curve(&s, &img, &heat, 0, 5, &img).unwrap(),
        ] {
            assert!(c.confidences.iter().all(|&v| v == f));
            assert!((c.auc - f).abs() < 1e-12);
        }
    }

    #[test]
    fn two_steps_sample_three_points() {
        let (s, img, base) = scorer_and_images();
        let c = deletion_curve(&s, &img, &random_heatmap(3, 4, 2), 0, 2, &base).unwrap();
        assert_eq!(c.fractions, vec![0.0, 0.5, 1.0]);
        assert!(deletion_curve(&s, &img, &random_heatmap(3, 4, 2), 0, 1, &base).is_err());
    }

    #[test]
    fn endpoints_are_image_and_baseline() {
        let (s, img, base) = scorer_and_images();
        let heat = random_heatmap(3, 4, 3);
        let f_img = score(&s, &img, 1).unwrap();
        let f_base = score(&s, &base, 1).unwrap();
        let del = deletion_curve(&s, &img, &heat, 1, 7, &base).unwrap();
        let ins = insertion_curve(&s, &img, &heat, 1, 7, &base).unwrap();
        assert_eq!(del.confidences[0], f_img);
        assert_eq!(*del.confidences.last().unwrap(), f_base);
        assert_eq!(ins.confidences[0], f_base);
        assert_eq!(*ins.confidences.last().unwrap(), f_img);
        assert!((ins.confidences.last().unwrap() - del.confidences[0]).abs() < 1e-6);
    }

    #[test]
    fn ties_follow_raster_order() {
        assert_eq!(rank_pixels(&[0.5, 0.9, 0.5, 0.9]), vec![1, 3, 0, 2]);
        // An all-ones heatmap deletes in raster order.
        let (s, img, base) = scorer_and_images();
        let c = deletion_curve(&s, &img, &Mask::ones(3, 4), 0, 12, &base).unwrap();
        for k in 0..=12 {
            let keep: Vec<f64> = (0..12).map(|p| if p < k { 0.0 } else { 1.0 }).collect();
            let expect = score(&s, &blend_pixels(&img, &base, &keep), 0).unwrap();
            assert_eq!(c.confidences[k], expect);
        }
        let again = deletion_curve(&s, &img, &Mask::ones(3, 4), 0, 12, &base).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn low_resolution_heatmaps_are_upsampled() {
        let (s, img, base) = scorer_and_images();
        let low = Mask::new(1, 2, vec![1.0, 0.0]).unwrap();
        let c = deletion_curve(&s, &img, &low, 0, 4, &base).unwrap();
        assert_eq!(c.len(), 5);
    }
}
