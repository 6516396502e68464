use std::collections::{BTreeSet, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};

use dashmap::DashMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{check_input, Scorer};
use crate::perturbation::{blend_pixels, PatchGrid, PatchSubset};

/// Largest grid [`exhaustive_mse`] accepts (2¹⁶ subsets).
pub const EXHAUSTIVE_PATCH_CAP: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub beam_width: usize,
    pub max_subset_size: usize,
    /// `τ`: an MSE keeps at least `τ · full_confidence`.
    pub threshold_ratio: f64,
    /// Largest patch overlap allowed between two SAG roots.
    pub diversity_overlap: usize,
    pub max_roots: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            grid_rows: 7,
            grid_cols: 7,
            beam_width: 50,
            max_subset_size: 10,
            threshold_ratio: 0.9,
            diversity_overlap: 1,
            max_roots: 3,
        }
    }
}

impl SearchConfig {
    pub fn patch_count(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return Err(Error::input("grid dimensions must be positive"));
        }
        if self.beam_width == 0 || self.max_subset_size == 0 || self.max_roots == 0 {
            return Err(Error::input("beam_width, max_subset_size and max_roots must be positive"));
        }
        if self.max_subset_size > self.patch_count() {
            return Err(Error::input(format!(
                "max_subset_size {} exceeds {} patches",
                self.max_subset_size,
                self.patch_count()
            )));
        }
        if !(self.threshold_ratio > 0.0 && self.threshold_ratio <= 1.0) {
            return Err(Error::input("threshold_ratio must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseRecord {
    pub subset: PatchSubset,
    pub confidence: f64,
    /// Every one-patch removal falls below the threshold.
    pub minimal: bool,
}

/// Scores patch subsets of one image against one baseline, with an optional
/// concurrent memo keyed by subset.
pub struct Evaluator<'a, S: ?Sized> {
    scorer: &'a S,
    image: &'a Image,
    baseline: &'a Image,
    class_index: usize,
    grid: PatchGrid,
    cache: Option<DashMap<Vec<usize>, f64>>,
    evaluations: AtomicUsize,
    full_confidence: f64,
}

impl<'a, S: Scorer + ?Sized> Evaluator<'a, S> {
    pub fn new(
        scorer: &'a S,
        image: &'a Image,
        baseline: &'a Image,
        class_index: usize,
        grid: PatchGrid,
    ) -> Result<Self> {
        check_input(scorer, image, class_index)?;
        image.ensure_same_shape(baseline)?;
        if grid.height != image.height() || grid.width != image.width() {
            return Err(Error::input("grid does not match the image size"));
        }
        let full_confidence = scorer.probabilities(image)[class_index];
        Ok(Evaluator {
            scorer,
            image,
            baseline,
            class_index,
            grid,
            cache: Some(DashMap::new()),
            evaluations: AtomicUsize::new(0),
            full_confidence,
        })
    }

    /// Same evaluator without memoization.
    pub fn uncached(mut self) -> Self {
        self.cache = None;
        self
    }

    pub fn grid(&self) -> PatchGrid {
        self.grid
    }

    pub fn class_index(&self) -> usize {
        self.class_index
    }

    pub fn full_confidence(&self) -> f64 {
        self.full_confidence
    }

    /// Number of scorer calls made so far.
    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::Relaxed)
    }

    /// Confidence with only `subset` kept.
    pub fn confidence(&self, subset: &PatchSubset) -> f64 {
        if let Some(cache) = &self.cache {
            if let Some(v) = cache.get(subset.members()) {
                return *v;
            }
        }
        let value = self.evaluate(subset);
        if let Some(cache) = &self.cache {
            cache.insert(subset.members().to_vec(), value);
        }
        value
    }

    fn evaluate(&self, subset: &PatchSubset) -> f64 {
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        let mut per_patch = vec![0.0; self.grid.patch_count()];
        for &m in subset.members() {
            per_patch[m] = 1.0;
        }
        let keep = self.grid.expand(&per_patch);
        self.scorer.probabilities(&blend_pixels(self.image, self.baseline, &keep))[self.class_index]
    }

    fn check_subset(&self, subset: &PatchSubset) -> Result<()> {
        if subset.patch_count() != self.grid.patch_count() {
            return Err(Error::input("subset and grid disagree on patch count"));
        }
        Ok(())
    }

    fn check_config(&self, config: &SearchConfig) -> Result<f64> {
        config.validate()?;
        if config.grid_rows != self.grid.rows || config.grid_cols != self.grid.cols {
            return Err(Error::input("search grid differs from the evaluator grid"));
        }
        Ok(config.threshold_ratio * self.full_confidence)
    }

    fn one_removal_minimal(&self, subset: &PatchSubset, threshold: f64) -> bool {
        subset.members().iter().all(|&m| self.confidence(&subset.without(m)) < threshold)
    }

    fn record(&self, subset: PatchSubset, confidence: f64) -> MseRecord {
        MseRecord { subset, confidence, minimal: true }
    }
}

/// Score of `Φ(image, subset_to_mask(subset))` for `class_index`.
pub fn confidence_of<S: Scorer + ?Sized>(
    scorer: &S,
    image: &Image,
    baseline: &Image,
    grid: PatchGrid,
    subset: &PatchSubset,
    class_index: usize,
) -> Result<f64> {
    let eval = Evaluator::new(scorer, image, baseline, class_index, grid)?.uncached();
    eval.check_subset(subset)?;
    Ok(eval.confidence(subset))
}

fn sort_records(records: &mut [MseRecord]) {
    records.sort_by(|a, b| {
        a.subset
            .len()
            .cmp(&b.subset.len())
            .then(b.confidence.total_cmp(&a.confidence))
            .then(a.subset.cmp(&b.subset))
    });
}

/// Level-wise beam search for MSEs.
///
/// Each level expands every beam member by every unused patch, drops
/// duplicates and supersets of MSEs already found, and scores the rest in
/// parallel. Qualifying candidates that pass the one-removal check are
/// recorded and never expanded; the `beam_width` best of the remainder (ties
/// by subset order) form the next beam. Returns the recorded MSEs sorted by
/// size, then confidence descending; empty when none exists within
/// `max_subset_size`.
pub fn beam_search_mse<S: Scorer + ?Sized>(eval: &Evaluator<'_, S>, config: &SearchConfig) -> Result<Vec<MseRecord>> {
    let threshold = eval.check_config(config)?;
    let n = eval.grid.patch_count();
    let empty = PatchSubset::empty(n);
    let c0 = eval.confidence(&empty);
    if c0 >= threshold {
        return Ok(vec![eval.record(empty, c0)]);
    }

    let mut found: Vec<MseRecord> = Vec::new();
    let mut beam = vec![empty];
    for _size in 1..=config.max_subset_size {
        let candidates: BTreeSet<PatchSubset> = beam
            .iter()
            .flat_map(|b| (0..n).filter(|p| !b.contains(*p)).map(move |p| b.with(p)))
            .filter(|c| !found.iter().any(|f| f.subset.is_subset_of(c)))
            .collect();
        if candidates.is_empty() {
            break;
        }
        let scored: Vec<(PatchSubset, f64)> = candidates
            .into_par_iter()
            .map(|c| {
                let v = eval.confidence(&c);
                (c, v)
            })
            .collect();

        let mut rest = Vec::new();
        for (subset, confidence) in scored {
            if confidence >= threshold {
                if eval.one_removal_minimal(&subset, threshold) {
                    found.push(eval.record(subset, confidence));
                }
            } else {
                rest.push((subset, confidence));
            }
        }
        rest.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        rest.truncate(config.beam_width);
        beam = rest.into_iter().map(|(s, _)| s).collect();
        if beam.is_empty() {
            break;
        }
    }
    sort_records(&mut found);
    Ok(found)
}

/// Every subset of size `≤ max_subset_size` that meets the threshold while
/// no proper subset does. Refuses grids above [`EXHAUSTIVE_PATCH_CAP`] patches.
pub fn exhaustive_mse<S: Scorer + ?Sized>(eval: &Evaluator<'_, S>, config: &SearchConfig) -> Result<Vec<MseRecord>> {
    let threshold = eval.check_config(config)?;
    let n = eval.grid.patch_count();
    if n > EXHAUSTIVE_PATCH_CAP {
        return Err(Error::Capacity { patches: n, cap: EXHAUSTIVE_PATCH_CAP });
    }
    let subset_of = |bits: u32| {
        let members = (0..n).filter(|p| bits & (1 << p) != 0).collect();
        PatchSubset::new(n, members).expect("indices below patch count")
    };
    let limit = 1u32 << n;
    let confidences: Vec<f64> = (0..limit)
        .into_par_iter()
        .map(|bits| {
            if bits.count_ones() as usize > config.max_subset_size {
                f64::NEG_INFINITY
            } else {
                eval.confidence(&subset_of(bits))
            }
        })
        .collect();
    // below[s]: some proper subset of s qualifies. Every proper subset is
    // reachable through one-removals, so one pass in increasing order suffices.
    let mut below = vec![false; limit as usize];
    let mut out = Vec::new();
    for bits in 0..limit {
        let mut b = false;
        let mut rest = bits;
        while rest != 0 {
            let low = rest & rest.wrapping_neg();
            let child = (bits ^ low) as usize;
            b |= below[child] || confidences[child] >= threshold;
            rest ^= low;
        }
        below[bits as usize] = b;
        let c = confidences[bits as usize];
        if c >= threshold && !b {
            out.push(eval.record(subset_of(bits), c));
        }
    }
    sort_records(&mut out);
    Ok(out)
}

/// Greedy diversity filter over MSEs sorted by (size, confidence desc): keeps
/// an MSE when it overlaps every kept one in at most `overlap_bound` patches.
pub fn diverse_roots(mses: &[MseRecord], overlap_bound: usize, max_roots: usize) -> Vec<MseRecord> {
    let mut kept: Vec<MseRecord> = Vec::new();
    let mut seen = HashSet::new();
    for m in mses {
        if kept.len() >= max_roots {
            break;
        }
        if !seen.insert(m.subset.clone()) {
            continue;
        }
        if kept.iter().all(|k| k.subset.overlap(&m.subset) <= overlap_bound) {
            kept.push(m.clone());
        }
    }
    kept
}
