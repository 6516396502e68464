//! Masks, patch grids and the perturbation operator
//! `Φ(I, M) = I ⊙ M + I₀ ⊙ (1 − M)`.
//!
//! Mask semantics are fixed throughout the crate: 1 keeps the original pixel,
//! 0 replaces it with the baseline. The importance heatmap shown to users is
//! `1 − M`.
//!
//! A low-resolution mask is applied to an image patch-wise: mask cell
//! `(i, j)` covers exactly the pixels of patch `(i, j)` of the [`PatchGrid`]
//! with the mask's dimensions. Smooth [`upsample`] is used where a dense
//! per-pixel heatmap is needed (metrics, rendering).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mask {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::input("mask dimensions must be positive"));
        }
        if values.len() != rows * cols {
            return Err(Error::input(format!(
                "mask {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::input(format!("mask value {v} outside [0, 1]")));
        }
        Ok(Mask { rows, cols, values })
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Result<Self> {
        Mask::new(rows, cols, vec![value; rows * cols])
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Mask { rows, cols, values: vec![1.0; rows * cols] }
    }

    /// Projects arbitrary reals onto `[0, 1]`.
    pub fn projected(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("mask values must be finite"));
        }
        Mask::new(rows, cols, values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    /// Validates a deserialized mask.
    pub fn checked(self) -> Result<Self> {
        Mask::new(self.rows, self.cols, self.values)
    }
}

/// `rows × cols` tiling of an image. Patches are `⌊H/rows⌋ × ⌊W/cols⌋`
/// pixels except the last row/column, which absorbs the remainder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub height: usize,
    pub width: usize,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize, height: usize, width: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::input("grid dimensions must be positive"));
        }
        if rows > height || cols > width {
            return Err(Error::input(format!(
                "grid {rows}x{cols} is finer than the {height}x{width} image"
            )));
        }
        Ok(PatchGrid { rows, cols, height, width })
    }

    pub fn for_image(rows: usize, cols: usize, image: &Image) -> Result<Self> {
        PatchGrid::new(rows, cols, image.height(), image.width())
    }

    pub fn patch_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        let step = self.height / self.rows;
        let end = if i + 1 == self.rows { self.height } else { (i + 1) * step };
        i * step..end
    }

    pub fn col_range(&self, j: usize) -> std::ops::Range<usize> {
        let step = self.width / self.cols;
        let end = if j + 1 == self.cols { self.width } else { (j + 1) * step };
        j * step..end
    }

    /// Patch index (row-major) containing pixel `(row, col)`.
    pub fn patch_of(&self, row: usize, col: usize) -> usize {
        let pr = (row / (self.height / self.rows)).min(self.rows - 1);
        let pc = (col / (self.width / self.cols)).min(self.cols - 1);
        pr * self.cols + pc
    }

    /// Patch index of every pixel, row-major `H×W`.
    pub fn pixel_patches(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.height * self.width);
        for r in 0..self.height {
            for c in 0..self.width {
                out.push(self.patch_of(r, c));
            }
        }
        out
    }

    /// Broadcasts one value per patch to one value per pixel.
    pub fn expand(&self, per_patch: &[f64]) -> Vec<f64> {
        debug_assert_eq!(per_patch.len(), self.patch_count());
        self.pixel_patches().into_iter().map(|p| per_patch[p]).collect()
    }

    /// Adjoint of [`expand`](Self::expand): sums per-pixel values within each patch.
    pub fn pool_sum(&self, per_pixel: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.patch_count()];
        for (v, p) in per_pixel.iter().zip(self.pixel_patches()) {
            out[p] += v;
        }
        out
    }

    /// Mean of each patch, row-major.
    pub fn pool_mean(&self, per_pixel: &[f64]) -> Vec<f64> {
        let mut sums = vec![0.0; self.patch_count()];
        let mut counts = vec![0usize; self.patch_count()];
        for (v, p) in per_pixel.iter().zip(self.pixel_patches()) {
            sums[p] += v;
            counts[p] += 1;
        }
        sums.iter().zip(counts).map(|(s, n)| s / n as f64).collect()
    }
}

/// Ordered set of patch indices on a grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatchSubset {
    patch_count: usize,
    members: Vec<usize>,
}

impl PatchSubset {
    pub fn new(patch_count: usize, mut members: Vec<usize>) -> Result<Self> {
        members.sort_unstable();
        if members.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::input("duplicate patch index"));
        }
        if let Some(&m) = members.last() {
            if m >= patch_count {
                return Err(Error::input(format!("patch index {m} out of range for {patch_count} patches")));
            }
        }
        Ok(PatchSubset { patch_count, members })
    }

    pub fn empty(patch_count: usize) -> Self {
        PatchSubset { patch_count, members: Vec::new() }
    }

    pub fn full(patch_count: usize) -> Self {
        PatchSubset { patch_count, members: (0..patch_count).collect() }
    }

    pub fn patch_count(&self) -> usize {
        self.patch_count
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, patch: usize) -> bool {
        self.members.binary_search(&patch).is_ok()
    }

    pub fn with(&self, patch: usize) -> Self {
        let mut members = self.members.clone();
        if let Err(pos) = members.binary_search(&patch) {
            members.insert(pos, patch);
        }
        PatchSubset { patch_count: self.patch_count, members }
    }

    pub fn without(&self, patch: usize) -> Self {
        let members = self.members.iter().copied().filter(|&m| m != patch).collect();
        PatchSubset { patch_count: self.patch_count, members }
    }

    pub fn is_subset_of(&self, other: &PatchSubset) -> bool {
        self.members.iter().all(|m| other.contains(*m))
    }

    pub fn overlap(&self, other: &PatchSubset) -> usize {
        self.members.iter().filter(|m| other.contains(**m)).count()
    }

    pub fn symmetric_difference(&self, other: &PatchSubset) -> usize {
        self.len() + other.len() - 2 * self.overlap(other)
    }
}

/// Bilinear upsampling with pixel-centre alignment: output pixel `x` samples
/// the source at `(x + ½)·(n/N) − ½`, clamped to the source extent.
pub fn upsample(mask: &Mask, target_height: usize, target_width: usize) -> Result<Mask> {
    if target_height < mask.rows || target_width < mask.cols {
        return Err(Error::input(format!(
            "cannot upsample {}x{} mask to smaller {target_height}x{target_width}",
            mask.rows, mask.cols
        )));
    }
    let axis = |n_src: usize, n_dst: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_src as f64 / n_dst as f64;
        (0..n_dst)
            .map(|x| {
                let s = ((x as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_src - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_src - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = axis(mask.rows, target_height);
    let xs = axis(mask.cols, target_width);
    let mut values = Vec::with_capacity(target_height * target_width);
    for &(y0, y1, ty) in &ys {
        for &(x0, x1, tx) in &xs {
            let top = mask.get(y0, x0) * (1.0 - tx) + mask.get(y0, x1) * tx;
            let bottom = mask.get(y1, x0) * (1.0 - tx) + mask.get(y1, x1) * tx;
            values.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    Mask::projected(target_height, target_width, values)
}

/// Per-pixel mask values for `image`, expanding a low-resolution mask patch-wise.
pub fn pixel_mask(mask: &Mask, height: usize, width: usize) -> Result<Vec<f64>> {
    if mask.rows == height && mask.cols == width {
        return Ok(mask.values.clone());
    }
    let grid = PatchGrid::new(mask.rows, mask.cols, height, width)?;
    Ok(grid.expand(&mask.values))
}

/// Blends with per-pixel keep weights: `image ⊙ keep + baseline ⊙ (1 − keep)`.
pub(crate) fn blend_pixels(image: &Image, baseline: &Image, keep: &[f64]) -> Image {
    let c = image.channels();
    let mut out = baseline.clone();
    for (((o, &i), &b), idx) in out.data_mut().iter_mut().zip(image.data()).zip(baseline.data()).zip(0..) {
        let m = keep[idx / c];
        *o = (i * m + b * (1.0 - m)).clamp(0.0, 1.0);
    }
    out
}

/// `Φ(I, M) = I ⊙ M + I₀ ⊙ (1 − M)`.
pub fn apply_mask(image: &Image, baseline: &Image, mask: &Mask) -> Result<Image> {
    image.ensure_same_shape(baseline)?;
    let keep = pixel_mask(mask, image.height(), image.width())?;
    Ok(blend_pixels(image, baseline, &keep))
}

/// Binary mask at grid resolution: 1 on member patches.
pub fn subset_to_mask(subset: &PatchSubset, grid: &PatchGrid) -> Result<Mask> {
    if subset.patch_count() != grid.patch_count() {
        return Err(Error::input("subset and grid disagree on patch count"));
    }
    let mut values = vec![0.0; grid.patch_count()];
    for &m in subset.members() {
        values[m] = 1.0;
    }
    Mask::new(grid.rows, grid.cols, values)
}

/// Elementwise `1 − M`.
pub fn complement_mask(mask: &Mask) -> Mask {
    Mask {
        rows: mask.rows,
        cols: mask.cols,
        values: mask.values.iter().map(|v| 1.0 - v).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Shape;
    use proptest::prelude::*;

    fn img(shape: Shape, f: impl Fn(usize) -> f64) -> Image {
        Image::new(shape, (0..shape.len()).map(f).collect()).unwrap()
    }

    #[test]
    fn upsample_two_by_two_ramp_fixture() {
        let m = Mask::new(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let up = upsample(&m, 4, 4).unwrap();
        let row = [0.0, 0.25, 0.75, 1.0];
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(up.get(r, c), row[c]);
            }
        }
    }

    #[test]
    fn upsample_constant_and_single_cell() {
        let m = Mask::filled(3, 5, 0.3).unwrap();
        let up = upsample(&m, 17, 11).unwrap();
        assert!(up.values().iter().all(|v| (v - 0.3).abs() < 1e-15));
        let one = Mask::filled(1, 1, 0.8).unwrap();
        assert!(upsample(&one, 6, 9).unwrap().values().iter().all(|&v| v == 0.8));
        assert!(upsample(&m, 2, 11).is_err());
    }

    #[test]
    fn apply_mask_extremes_and_midpoint() {
        let s = Shape::new(4, 4, 2);
        let a = img(s, |i| (i % 7) as f64 / 7.0);
        let b = img(s, |i| (i % 3) as f64 / 3.0);
        assert_eq!(apply_mask(&a, &b, &Mask::ones(2, 2)).unwrap(), a);
        assert_eq!(apply_mask(&a, &b, &Mask::filled(4, 4, 0.0).unwrap()).unwrap(), b);
        let mid = apply_mask(&a, &b, &Mask::filled(2, 2, 0.5).unwrap()).unwrap();
        for ((m, x), y) in mid.data().iter().zip(a.data()).zip(b.data()) {
            assert!((m - (x + y) / 2.0).abs() < 1e-15);
        }
        let other = Image::filled(Shape::new(4, 4, 1), 0.0).unwrap();
        assert!(apply_mask(&a, &other, &Mask::ones(2, 2)).is_err());
    }

    #[test]
    fn grid_tiles_with_remainder_in_last_patch() {
        let g = PatchGrid::new(7, 7, 32, 32).unwrap();
        assert_eq!(g.row_range(0), 0..4);
        assert_eq!(g.row_range(6), 24..32);
        assert_eq!(g.patch_of(31, 31), 48);
        let counts = g.pool_sum(&vec![1.0; 32 * 32]);
        assert_eq!(counts.iter().sum::<f64>(), 1024.0);
        assert_eq!(counts[0], 16.0);
        assert_eq!(counts[48], 64.0);
        assert!(PatchGrid::new(8, 2, 4, 4).is_err());
    }

    #[test]
    fn subset_masks() {
        let g = PatchGrid::new(7, 7, 32, 32).unwrap();
        let empty = subset_to_mask(&PatchSubset::empty(49), &g).unwrap();
        assert!(empty.values().iter().all(|&v| v == 0.0));
        let full = subset_to_mask(&PatchSubset::full(49), &g).unwrap();
        assert!(full.values().iter().all(|&v| v == 1.0));
        let first = subset_to_mask(&PatchSubset::new(49, vec![0]).unwrap(), &g).unwrap();
        assert_eq!(first.get(0, 0), 1.0);
        assert_eq!(first.values().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn subset_validation_and_set_ops() {
        assert!(PatchSubset::new(9, vec![1, 1]).is_err());
        assert!(PatchSubset::new(9, vec![9]).is_err());
        let a = PatchSubset::new(9, vec![3, 1, 2]).unwrap();
        assert_eq!(a.members(), &[1, 2, 3]);
        let b = PatchSubset::new(9, vec![2, 3, 4]).unwrap();
        assert_eq!(a.overlap(&b), 2);
        assert_eq!(a.symmetric_difference(&b), 2);
        assert_eq!(a.with(0).members(), &[0, 1, 2, 3]);
        assert_eq!(a.without(2).members(), &[1, 3]);
        assert!(a.without(2).is_subset_of(&a));
    }

    #[test]
    fn complement_examples() {
        let m = Mask::filled(2, 3, 0.25).unwrap();
        assert!(complement_mask(&m).values().iter().all(|&v| v == 0.75));
        assert!(complement_mask(&Mask::ones(2, 2)).values().iter().all(|&v| v == 0.0));
    }

    fn arb_mask(rows: usize, cols: usize) -> impl Strategy<Value = Mask> {
        proptest::collection::vec(0.0..=1.0f64, rows * cols).prop_map(move |v| Mask::new(rows, cols, v).unwrap())
    }

    proptest! {
        #[test]
        fn blend_symmetry(
            a in proptest::collection::vec(0.0..=1.0f64, 36),
            b in proptest::collection::vec(0.0..=1.0f64, 36),
            m in arb_mask(3, 3),
        ) {
            let s = Shape::new(6, 6, 1);
            let ia = Image::new(s, a).unwrap();
            let ib = Image::new(s, b).unwrap();
            let x = apply_mask(&ia, &ib, &m).unwrap();
            let y = apply_mask(&ib, &ia, &m).unwrap();
            for i in 0..36 {
                prop_assert!((x.data()[i] + y.data()[i] - ia.data()[i] - ib.data()[i]).abs() < 1e-6);
            }
        }

        #[test]
        fn binary_masks_pick_exact_pixels(bits in proptest::collection::vec(any::<bool>(), 9)) {
            let s = Shape::new(7, 8, 2);
            let a = img(s, |i| (i % 5) as f64 / 5.0);
            let b = img(s, |i| (i % 4) as f64 / 4.0);
            let m = Mask::new(3, 3, bits.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect()).unwrap();
            let out = apply_mask(&a, &b, &m).unwrap();
            let g = PatchGrid::new(3, 3, 7, 8).unwrap();
            for r in 0..7 {
                for c in 0..8 {
                    for ch in 0..2 {
                        let expect = if bits[g.patch_of(r, c)] { a.get(r, c, ch) } else { b.get(r, c, ch) };
                        prop_assert_eq!(out.get(r, c, ch), expect);
                    }
                }
            }
        }

        #[test]
        fn upsample_preserves_range(m in arb_mask(3, 4), th in 4usize..20, tw in 4usize..20) {
            let up = upsample(&m, th, tw).unwrap();
            let lo = m.values().iter().copied().fold(f64::INFINITY, f64::min);
            let hi = m.values().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(up.values().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }

        #[test]
        fn complement_is_an_involution(m in arb_mask(4, 4)) {
            let back = complement_mask(&complement_mask(&m));
            for (x, y) in back.values().iter().zip(m.values()) {
                prop_assert!((x - y).abs() < 1e-15);
            }
        }
    }
}
