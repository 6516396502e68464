use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::search::{diverse_roots, MseRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseStatistics {
    pub images: usize,
    /// Entry `k`: fraction of images with an MSE of at most `k` patches.
    pub explainable_fraction: Vec<f64>,
    /// Images per count of MSEs found (all MSEs).
    pub mse_count_histogram: BTreeMap<usize, usize>,
    /// Images per count of diverse MSEs at the overlap bound.
    pub diverse_count_histogram: BTreeMap<usize, usize>,
    pub multiple_fraction_all: f64,
    pub multiple_fraction_diverse: f64,
}

/// Summary over per-image search results (each sorted as returned by the searches).
pub fn mse_statistics(results: &[Vec<MseRecord>], max_subset_size: usize, overlap_bound: usize) -> Result<MseStatistics> {
    if results.is_empty() {
        return Err(Error::input("no search results to summarize"));
    }
    let images = results.len() as f64;
    let explainable_fraction = (0..=max_subset_size)
        .map(|k| results.iter().filter(|r| r.iter().any(|m| m.subset.len() <= k)).count() as f64 / images)
        .collect();
    let mut mse_count_histogram = BTreeMap::new();
    let mut diverse_count_histogram = BTreeMap::new();
    let (mut multi_all, mut multi_diverse) = (0usize, 0usize);
    for r in results {
        let diverse = diverse_roots(r, overlap_bound, usize::MAX).len();
        *mse_count_histogram.entry(r.len()).or_insert(0) += 1;
        *diverse_count_histogram.entry(diverse).or_insert(0) += 1;
        multi_all += usize::from(r.len() >= 2);
        multi_diverse += usize::from(diverse >= 2);
    }
    Ok(MseStatistics {
        images: results.len(),
        explainable_fraction,
        mse_count_histogram,
        diverse_count_histogram,
        multiple_fraction_all: multi_all as f64 / images,
        multiple_fraction_diverse: multi_diverse as f64 / images,
    })
}
