//! Mask optimization for saliency heatmaps.
//!
//! Minimizes
//!
//! ```text
//! F(M) = f_c(Φ(I, M)) + λ_ins·(1 − f_c(Φ(I, 1 − M))) + λ₁‖1 − M‖₁ + λ₂·BTV(M)
//! ```
//!
//! over masks `0 ≤ M ≤ 1` at a chosen grid resolution. With `λ_ins = 0` this
//! is the classic deletion-mask objective; I-GOS replaces the gradient of the
//! `f_c` term by an integrated gradient averaged over `S` blends of image and
//! baseline, and iGOS++ adds the insertion term (with its own integrated
//! direction) and the bilateral TV regularizer.
//!
//! Each iteration takes a projected step along the combined direction with
//! Armijo backtracking on `F`, and stops after `max_iterations` or two
//! consecutive line-search failures.

mod regularizer;

pub use regularizer::{btv, Guide, RegularizerWeights};

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{deletion_curve, insertion_curve, Curve, DEFAULT_STEPS};
use crate::model::{blur_baseline, check_input, Baseline, BaselineConfig, Capability, Scorer};
use crate::perturbation::{blend_pixels, complement_mask, Mask, PatchGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Integrated-gradient deletion objective.
    Igos,
    /// I-GOS plus the insertion term and bilateral TV.
    Igospp,
    /// Plain projected gradient on the deletion objective with unweighted TV.
    Mask2018,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "igos" => Ok(Method::Igos),
            "igospp" => Ok(Method::Igospp),
            "mask2018" => Ok(Method::Mask2018),
            other => Err(Error::input(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSearch {
    pub initial_step: f64,
    pub shrink: f64,
    pub max_halvings: usize,
    /// Sufficient-decrease constant.
    pub armijo: f64,
}

impl Default for LineSearch {
    fn default() -> Self {
        LineSearch { initial_step: 8.0, shrink: 0.5, max_halvings: 12, armijo: 1e-4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Mask grid is `resolution × resolution`.
    pub resolution: usize,
    pub lambda_l1: f64,
    pub lambda_tv: f64,
    /// Exponent `β` of the BTV penalty.
    pub tv_beta: f64,
    /// Edge scale `σ` of the BTV weights; `None` gives unweighted TV.
    pub btv_sigma: Option<f64>,
    /// Evaluate BTV on the pixel grid against the full-resolution image
    /// instead of on the mask grid against the pooled image.
    pub btv_full_resolution: bool,
    pub lambda_ins: f64,
    /// Number of blend samples `S` in the integrated gradient.
    pub ig_steps: usize,
    pub noise_sigma: f64,
    pub max_iterations: usize,
    pub line_search: LineSearch,
    pub baseline: BaselineConfig,
    /// Steps of the deletion/insertion curves attached to results.
    pub metric_steps: usize,
    pub seed: u64,
}

impl OptimizerConfig {
    /// Defaults for `method` at a `resolution × resolution` grid.
    ///
    /// `λ₁` and `λ₂` are per-cell weights scaled by `49 / cells`, so the
    /// total penalty of a given covered area stays comparable across
    /// resolutions.
    pub fn for_method(method: Method, resolution: usize) -> Self {
        let area = 49.0 / (resolution * resolution) as f64;
        let base = OptimizerConfig {
            resolution,
            lambda_l1: 0.05 * area,
            lambda_tv: 0.02 * area,
            tv_beta: 2.0,
            btv_sigma: Some(0.1),
            btv_full_resolution: false,
            lambda_ins: 1.0,
            ig_steps: 20,
            noise_sigma: 0.01,
            max_iterations: 20,
            line_search: LineSearch::default(),
            baseline: BaselineConfig::default(),
            metric_steps: DEFAULT_STEPS,
            seed: 0,
        };
        match method {
            Method::Igospp => base,
            Method::Igos => OptimizerConfig { lambda_ins: 0.0, btv_sigma: None, ..base },
            Method::Mask2018 => OptimizerConfig {
                lambda_ins: 0.0,
                btv_sigma: None,
                ig_steps: 1,
                noise_sigma: 0.0,
                ..base
            },
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        OptimizerConfig { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda_l1, self.lambda_tv, self.lambda_ins, self.noise_sigma];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::input("regularizer, insertion and noise weights must be finite and non-negative"));
        }
        if !(self.tv_beta >= 1.0 && self.tv_beta.is_finite()) {
            return Err(Error::input("tv_beta must be at least 1"));
        }
        if let Some(s) = self.btv_sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::input("btv_sigma must be positive"));
            }
        }
        if self.resolution == 0 || self.ig_steps == 0 || self.max_iterations == 0 {
            return Err(Error::input("resolution, ig_steps and max_iterations must be positive"));
        }
        let ls = &self.line_search;
        if !(ls.initial_step > 0.0 && ls.shrink > 0.0 && ls.shrink < 1.0 && ls.armijo >= 0.0) {
            return Err(Error::input("line search needs a positive initial step and shrink in (0, 1)"));
        }
        Ok(())
    }

    pub fn regularizer_weights(&self) -> RegularizerWeights {
        RegularizerWeights {
            lambda_l1: self.lambda_l1,
            lambda_tv: self.lambda_tv,
            tv_beta: self.tv_beta,
            btv_sigma: self.btv_sigma,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapResult {
    pub mask: Mask,
    /// `1 − M`.
    pub heatmap: Mask,
    /// Objective before the first step, then after every iteration.
    pub loss_trace: Vec<f64>,
    pub iterations: usize,
    pub accepted_steps: usize,
    pub stop: StopReason,
    pub deletion: Curve,
    pub insertion: Curve,
    pub baseline_sigma: f64,
    pub baseline_confidence: f64,
    pub config: OptimizerConfig,
    pub wall_time_ms: f64,
}

impl HeatmapResult {
    /// Copy with the wall time zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        HeatmapResult { wall_time_ms: 0.0, ..self.clone() }
    }
}

/// Everything fixed during one optimization run.
struct Problem<'a, S: ?Sized> {
    scorer: &'a S,
    image: &'a Image,
    baseline: &'a Image,
    class_index: usize,
    grid: PatchGrid,
    config: &'a OptimizerConfig,
    /// BTV edge weights on the grid BTV is evaluated on.
    edge_weights: Vec<f64>,
}

impl<'a, S: Scorer + ?Sized> Problem<'a, S> {
    fn new(
        scorer: &'a S,
        image: &'a Image,
        baseline: &'a Image,
        class_index: usize,
        config: &'a OptimizerConfig,
    ) -> Result<Self> {
        config.validate()?;
        check_input(scorer, image, class_index)?;
        image.ensure_same_shape(baseline)?;
        let grid = PatchGrid::for_image(config.resolution, config.resolution, image)?;
        let guide = if config.btv_full_resolution {
            full_guide(image)
        } else {
            pooled_guide(image, &grid)
        };
        let edge_weights = guide.edge_weights(config.btv_sigma);
        Ok(Problem { scorer, image, baseline, class_index, grid, config, edge_weights })
    }

    fn check_mask(&self, mask: &Mask) -> Result<()> {
        if mask.rows() != self.grid.rows || mask.cols() != self.grid.cols {
            return Err(Error::input(format!(
                "mask is {}x{}, configured resolution is {}",
                mask.rows(),
                mask.cols(),
                self.config.resolution
            )));
        }
        Ok(())
    }

    fn class_score(&self, image: &Image) -> f64 {
        self.scorer.probabilities(image)[self.class_index]
    }

    fn regularizer(&self, values: &[f64]) -> (f64, Vec<f64>) {
        let w = self.config.regularizer_weights();
        if self.config.btv_full_resolution {
            let pixels = self.grid.expand(values);
            let (tv, tv_grad) = btv(&pixels, self.image.height(), self.image.width(), &self.edge_weights, w.tv_beta);
            let l1: f64 = values.iter().map(|m| 1.0 - m).sum();
            let grad = self
                .grid
                .pool_sum(&tv_grad)
                .into_iter()
                .map(|g| -w.lambda_l1 + w.lambda_tv * g)
                .collect();
            (w.lambda_l1 * l1 + w.lambda_tv * tv, grad)
        } else {
            regularizer::regularizer(values, self.grid.rows, self.grid.cols, &self.edge_weights, &w)
        }
    }

    fn loss(&self, values: &[f64]) -> f64 {
        let keep = self.grid.expand(values);
        let deletion = self.class_score(&blend_pixels(self.image, self.baseline, &keep));
        let insertion = if self.config.lambda_ins > 0.0 {
            let inverse: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
            self.config.lambda_ins * (1.0 - self.class_score(&blend_pixels(self.image, self.baseline, &inverse)))
        } else {
            0.0
        };
        deletion + insertion + self.regularizer(values).0
    }

    /// Blend weights `w_s = s/S` with seeded noise images for one direction computation.
    fn noisy_blends(&self, anchor: &Image, other: &Image, rng: &mut ChaCha8Rng) -> Result<Vec<Image>> {
        let s_total = self.config.ig_steps;
        let noise = if self.config.noise_sigma > 0.0 {
            Some(Normal::new(0.0, self.config.noise_sigma).map_err(|e| Error::input(e.to_string()))?)
        } else {
            None
        };
        (1..=s_total)
            .map(|s| {
                let w = s as f64 / s_total as f64;
                let data = anchor
                    .data()
                    .iter()
                    .zip(other.data())
                    .map(|(a, o)| {
                        let eps = noise.map_or(0.0, |n| n.sample(rng));
                        w * a + (1.0 - w) * o + eps
                    })
                    .collect();
                Image::from_clamped(anchor.shape(), data)
            })
            .collect()
    }

    /// `(1/S) Σ_s ∂/∂M f_c(Φ(J_s, M))` with `J_s = w_s·I + (1 − w_s)·I₀ + ε_s`.
    fn deletion_direction(&self, values: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let keep = self.grid.expand(values);
        let blends = self.noisy_blends(self.image, self.baseline, rng)?;
        let c = self.image.channels();
        let per_sample: Vec<Vec<f64>> = blends
            .par_iter()
            .map(|j| -> Result<Vec<f64>> {
                let x = blend_pixels(j, self.baseline, &keep);
                let (_, g) = self.scorer.probability_gradient(&x, self.class_index)?;
                // ∂Φ(J, M)/∂M = J − I₀, summed over channels per pixel
                let per_pixel: Vec<f64> = g
                    .chunks_exact(c)
                    .zip(j.data().chunks_exact(c).zip(self.baseline.data().chunks_exact(c)))
                    .map(|(gp, (jp, bp))| gp.iter().zip(jp.iter().zip(bp)).map(|(g, (j, b))| g * (j - b)).sum())
                    .collect();
                Ok(self.grid.pool_sum(&per_pixel))
            })
            .collect::<Result<_>>()?;
        Ok(average(per_sample))
    }

    /// `(1/S) Σ_s ∂/∂M [1 − f_c(I ⊙ (1 − M) + K_s ⊙ M)]` with
    /// `K_s = w_s·I₀ + (1 − w_s)·I + ε_s`, i.e. the complementary image whose
    /// removed region slides from the image itself to the baseline.
    fn insertion_direction(&self, values: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let keep_inverse: Vec<f64> = self.grid.expand(values).iter().map(|k| 1.0 - k).collect();
        let blends = self.noisy_blends(self.baseline, self.image, rng)?;
        let c = self.image.channels();
        let per_sample: Vec<Vec<f64>> = blends
            .par_iter()
            .map(|k_img| -> Result<Vec<f64>> {
                let x = blend_pixels(self.image, k_img, &keep_inverse);
                let (_, g) = self.scorer.probability_gradient(&x, self.class_index)?;
                // ∂x/∂M = K − I, and the term is 1 − f_c
                let per_pixel: Vec<f64> = g
                    .chunks_exact(c)
                    .zip(self.image.data().chunks_exact(c).zip(k_img.data().chunks_exact(c)))
                    .map(|(gp, (ip, kp))| gp.iter().zip(ip.iter().zip(kp)).map(|(g, (i, k))| g * (i - k)).sum())
                    .collect();
                Ok(self.grid.pool_sum(&per_pixel))
            })
            .collect::<Result<_>>()?;
        Ok(average(per_sample))
    }

    fn direction(&self, values: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let mut d = self.deletion_direction(values, rng)?;
        if self.config.lambda_ins > 0.0 {
            let ins = self.insertion_direction(values, rng)?;
            for (a, b) in d.iter_mut().zip(ins) {
                *a += self.config.lambda_ins * b;
            }
        }
        let (_, reg) = self.regularizer(values);
        for (a, b) in d.iter_mut().zip(reg) {
            *a += b;
        }
        Ok(d)
    }
}

fn average(samples: Vec<Vec<f64>>) -> Vec<f64> {
    let n = samples.len() as f64;
    let mut out = vec![0.0; samples[0].len()];
    for s in &samples {
        for (o, v) in out.iter_mut().zip(s) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// The image average-pooled per channel onto `grid`.
pub fn pooled_guide(image: &Image, grid: &PatchGrid) -> Guide {
    let c = image.channels();
    let planes = (0..c)
        .map(|ch| {
            let plane: Vec<f64> = image.data().iter().skip(ch).step_by(c).copied().collect();
            grid.pool_mean(&plane)
        })
        .collect();
    Guide { rows: grid.rows, cols: grid.cols, planes }
}

fn full_guide(image: &Image) -> Guide {
    let c = image.channels();
    let planes = (0..c)
        .map(|ch| image.data().iter().skip(ch).step_by(c).copied().collect())
        .collect();
    Guide { rows: image.height(), cols: image.width(), planes }
}

fn direction_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `g(M) = λ₁‖1 − M‖₁ + λ₂·BTV(M)` and its gradient. `guide` is the image
/// average-pooled to the mask grid (see [`pooled_guide`]).
pub fn regularizer(mask: &Mask, guide: &Guide, config: &OptimizerConfig) -> Result<(f64, Vec<f64>)> {
    if guide.rows != mask.rows() || guide.cols != mask.cols() {
        return Err(Error::input("guide and mask grids differ"));
    }
    let weights = guide.edge_weights(config.btv_sigma);
    Ok(regularizer::regularizer(mask.values(), mask.rows(), mask.cols(), &weights, &config.regularizer_weights()))
}

/// Integrated descent direction of the `f_c(Φ(I, M))` term on the mask grid.
/// `noise_seed` seeds the per-sample Gaussian noise.
pub fn integrated_descent_direction<S: Scorer + ?Sized>(
    scorer: &S,
    image: &Image,
    baseline: &Image,
    mask: &Mask,
    class_index: usize,
    config: &OptimizerConfig,
    noise_seed: u64,
) -> Result<Vec<f64>> {
    if scorer.capability() != Capability::GradientCapable {
        return Err(Error::Capability);
    }
    let p = Problem::new(scorer, image, baseline, class_index, config)?;
    p.check_mask(mask)?;
    p.deletion_direction(mask.values(), &mut direction_rng(noise_seed, 0))
}

/// Integrated descent direction of the `1 − f_c(Φ(I, 1 − M))` insertion term
/// (without the `λ_ins` factor).
pub fn insertion_descent_direction<S: Scorer + ?Sized>(
    scorer: &S,
    image: &Image,
    baseline: &Image,
    mask: &Mask,
    class_index: usize,
    config: &OptimizerConfig,
    noise_seed: u64,
) -> Result<Vec<f64>> {
    if scorer.capability() != Capability::GradientCapable {
        return Err(Error::Capability);
    }
    let p = Problem::new(scorer, image, baseline, class_index, config)?;
    p.check_mask(mask)?;
    p.insertion_direction(mask.values(), &mut direction_rng(noise_seed, 0))
}

/// `f_c(Φ(I, M)) + λ_ins·(1 − f_c(Φ(I, 1 − M))) + g(M)`.
pub fn total_loss<S: Scorer + ?Sized>(
    scorer: &S,
    image: &Image,
    baseline: &Image,
    mask: &Mask,
    class_index: usize,
    config: &OptimizerConfig,
) -> Result<f64> {
    let p = Problem::new(scorer, image, baseline, class_index, config)?;
    p.check_mask(mask)?;
    Ok(p.loss(mask.values()))
}

/// Result of one projected line-search step.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub values: Vec<f64>,
    pub loss: f64,
    pub step_size: f64,
}

/// Backtracking projected step along `-direction`. Accepts the first step
/// size `t` with `F(P(M − t·d)) ≤ F(M) − c·⟨d, M − P(M − t·d)⟩`; `None` when
/// every trial fails or the projection leaves `M` unchanged.
pub fn projected_line_search(
    values: &[f64],
    loss: f64,
    direction: &[f64],
    ls: &LineSearch,
    objective: impl Fn(&[f64]) -> f64,
) -> Option<Step> {
    let mut t = ls.initial_step;
    for _ in 0..=ls.max_halvings {
        let trial: Vec<f64> = values
            .iter()
            .zip(direction)
            .map(|(m, d)| (m - t * d).clamp(0.0, 1.0))
            .collect();
        let decrease: f64 = direction.iter().zip(values.iter().zip(&trial)).map(|(d, (m, n))| d * (m - n)).sum();
        if decrease <= 0.0 {
            return None;
        }
        let trial_loss = objective(&trial);
        if trial_loss <= loss - ls.armijo * decrease {
            return Some(Step { values: trial, loss: trial_loss, step_size: t });
        }
        t *= ls.shrink;
    }
    None
}

/// Optimizes a mask for `class_index`, building the blurred baseline first.
pub fn optimize<S: Scorer + ?Sized>(
    scorer: &S,
    image: &Image,
    class_index: usize,
    config: &OptimizerConfig,
) -> Result<HeatmapResult> {
    if scorer.capability() != Capability::GradientCapable {
        return Err(Error::Capability);
    }
    let baseline = blur_baseline(scorer, image, class_index, config.baseline)?;
    optimize_with_baseline(scorer, image, &baseline, class_index, config)
}

/// Same as [`optimize`] with a baseline that already passed its confidence check.
pub fn optimize_with_baseline<S: Scorer + ?Sized>(
    scorer: &S,
    image: &Image,
    baseline: &Baseline,
    class_index: usize,
    config: &OptimizerConfig,
) -> Result<HeatmapResult> {
    let started = Instant::now();
    if scorer.capability() != Capability::GradientCapable {
        return Err(Error::Capability);
    }
    let p = Problem::new(scorer, image, &baseline.image, class_index, config)?;
    let mut values = vec![1.0; p.grid.patch_count()];
    let mut loss = p.loss(&values);
    if !loss.is_finite() {
        return Err(Error::Optimization { iteration: 0, reason: format!("initial loss is {loss}") });
    }
    let mut loss_trace = vec![loss];
    let mut consecutive_failures = 0;
    let mut accepted_steps = 0;
    let mut iterations = 0;
    let mut stop = StopReason::MaxIterations;

    for iteration in 0..config.max_iterations {
        iterations = iteration + 1;
        let d = p.direction(&values, &mut direction_rng(config.seed, iteration as u64))?;
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::Optimization { iteration, reason: "non-finite descent direction".into() });
        }
        match projected_line_search(&values, loss, &d, &config.line_search, |v| p.loss(v)) {
            Some(step) => {
                if !step.loss.is_finite() {
                    return Err(Error::Optimization { iteration, reason: format!("loss became {}", step.loss) });
                }
                assert!(step.loss <= loss, "accepted step increased the objective");
                values = step.values;
                loss = step.loss;
                accepted_steps += 1;
                consecutive_failures = 0;
            }
            None => {
                consecutive_failures += 1;
            }
        }
        debug_assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
        loss_trace.push(loss);
        if consecutive_failures >= 2 {
            stop = StopReason::LineSearchFailed;
            break;
        }
    }

    let mask = Mask::new(p.grid.rows, p.grid.cols, values)?;
    let heatmap = complement_mask(&mask);
    let deletion = deletion_curve(scorer, image, &heatmap, class_index, config.metric_steps, &baseline.image)?;
    let insertion = insertion_curve(scorer, image, &heatmap, class_index, config.metric_steps, &baseline.image)?;
    Ok(HeatmapResult {
        mask,
        heatmap,
        loss_trace,
        iterations,
        accepted_steps,
        stop,
        deletion,
        insertion,
        baseline_sigma: baseline.sigma,
        baseline_confidence: baseline.confidence,
        config: *config,
        wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}
