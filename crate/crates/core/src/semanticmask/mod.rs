//! Edited-region masks from per-location feature similarity.
//!
//! Dense feature grids of the aligned original and edited images are compared
//! cell by cell with cosine similarity; Otsu's method picks the threshold that
//! best splits the similarity histogram, cells below it are marked edited, and
//! the grid-resolution mask is resampled to the output size.

mod features;
mod fmap;

use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use features::{extract_features_builtin, BUILTIN_DIM, ORIENTATION_BINS};
pub use fmap::{decode_fmap, encode_fmap, load_feature_file, store_feature_file, HEADER_LEN};

use crate::error::{Error, Result};
use crate::imagecore::{read_image, write_png, Channels, ImageBuffer};

pub const DEFAULT_OTSU_BINS: usize = 256;
pub const DEFAULT_PATCH_SIZE: usize = 16;
pub const MASK_SIZE: usize = 128;

/// Norm below which a feature vector is treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseFeatureMap {
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    patch_size: usize,
    values: Vec<f32>,
}

impl DenseFeatureMap {
    pub fn new(
        grid_h: usize,
        grid_w: usize,
        dim: usize,
        patch_size: usize,
        values: Vec<f32>,
    ) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 || dim == 0 || patch_size == 0 {
            return Err(Error::param(format!(
                "feature map dimensions must be positive (grid {grid_h}x{grid_w}, dim {dim}, patch {patch_size})"
            )));
        }
        if values.len() != grid_h * grid_w * dim {
            return Err(Error::param(format!(
                "feature map holds {} values, {grid_h}x{grid_w}x{dim} needs {}",
                values.len(),
                grid_h * grid_w * dim
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("feature map contains NaN or infinity"));
        }
        Ok(Self {
            grid_h,
            grid_w,
            dim,
            patch_size,
            values,
        })
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        let i = (row * self.grid_w + col) * self.dim;
        &self.values[i..i + self.dim]
    }

    pub fn cells(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.dim)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    grid_h: usize,
    grid_w: usize,
    scores: Vec<f64>,
}

impl SimilarityMap {
    pub fn new(grid_h: usize, grid_w: usize, scores: Vec<f64>) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 || scores.len() != grid_h * grid_w {
            return Err(Error::param(format!(
                "similarity map {grid_h}x{grid_w} cannot hold {} scores",
                scores.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::param("similarity scores must be finite"));
        }
        Ok(Self {
            grid_h,
            grid_w,
            scores,
        })
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }
}

/// Binary mask, 1 = edited.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct EditMask {
    width: usize,
    height: usize,
    bits: Vec<u8>,
}

impl std::fmt::Debug for EditMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "EditMask({}x{}, {} edited)",
            self.width,
            self.height,
            self.count_edited()
        )
    }
}

impl EditMask {
    /// `bits` must hold only 0 and 1.
    pub fn new(width: usize, height: usize, bits: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || bits.len() != width * height {
            return Err(Error::param(format!(
                "mask {width}x{height} cannot hold {} bits",
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::param("mask bits must be 0 or 1"));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![0; width * height])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self> {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(u8::from(f(x, y)));
            }
        }
        Self::new(width, height, bits)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x] == 1
    }

    pub fn count_edited(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn edited_fraction(&self) -> f64 {
        self.count_edited() as f64 / self.bits.len() as f64
    }

    /// Grayscale image with edited pixels at 255.
    pub fn to_image(&self) -> ImageBuffer {
        let data = self.bits.iter().map(|&b| b * 255).collect();
        ImageBuffer::new(self.width, self.height, Channels::Gray, data)
            .expect("mask dimensions are valid")
    }

    /// Any sample above 127 counts as edited; colour images use luma.
    pub fn from_image(img: &ImageBuffer) -> EditMask {
        let gray = crate::imagecore::to_grayscale(img);
        let bits = gray.data().iter().map(|&v| u8::from(v > 127)).collect();
        EditMask {
            width: img.width(),
            height: img.height(),
            bits,
        }
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        write_png(&self.to_image(), path)
    }

    pub fn read_png(path: &Path) -> Result<EditMask> {
        Ok(Self::from_image(&read_image(path)?))
    }
}

/// Per-cell cosine similarity; a cell where either vector has norm below
/// [`ZERO_NORM`] scores 0.
pub fn cosine_similarity_map(a: &DenseFeatureMap, b: &DenseFeatureMap) -> Result<SimilarityMap> {
    if (a.grid_h, a.grid_w, a.dim) != (b.grid_h, b.grid_w, b.dim) {
        return Err(Error::param(format!(
            "feature maps differ in shape: {}x{}x{} vs {}x{}x{}",
            a.grid_h, a.grid_w, a.dim, b.grid_h, b.grid_w, b.dim
        )));
    }
    let scores = a
        .cells()
        .zip(b.cells())
        .map(|(u, v)| {
            let (mut dot, mut nu, mut nv) = (0f64, 0f64, 0f64);
            for (&p, &q) in u.iter().zip(v) {
                let (p, q) = (f64::from(p), f64::from(q));
                dot += p * q;
                nu += p * p;
                nv += q * q;
            }
            let (nu, nv) = (nu.sqrt(), nv.sqrt());
            if nu < ZERO_NORM || nv < ZERO_NORM {
                0.0
            } else {
                (dot / (nu * nv)).clamp(-1.0, 1.0)
            }
        })
        .collect();
    SimilarityMap::new(a.grid_h, a.grid_w, scores)
}

/// Histogram bin of a score on `bins` equal-width bins over `[-1, 1]`.
#[inline]
pub fn score_bin(score: f64, bins: usize) -> usize {
    let t = (score + 1.0) / 2.0 * bins as f64;
    (t.floor().max(0.0) as usize).min(bins - 1)
}

/// Lower edge of bin `k`, i.e. the threshold separating bins `< k` from `>= k`.
#[inline]
pub fn bin_edge(k: usize, bins: usize) -> f64 {
    -1.0 + 2.0 * k as f64 / bins as f64
}

/// Between-class variance of a two-class split, up to the constant factor
/// `(bin width / total)^2`, from class counts and sums of bin indices.
///
/// Both inputs are exact integers, so any route to them yields bit-identical
/// variances.
#[inline]
pub fn between_class_variance(n0: u64, s0: u64, n1: u64, s1: u64) -> f64 {
    if n0 == 0 || n1 == 0 {
        return 0.0;
    }
    let (n0f, n1f) = (n0 as f64, n1 as f64);
    let diff = s0 as f64 / n0f - s1 as f64 / n1f;
    n0f * n1f * diff * diff
}

/// Otsu threshold over `bins` equal-width bins on `[-1, 1]`.
///
/// Candidates are the interior bin edges; the one with the largest
/// between-class variance wins and the lowest edge wins ties.
pub fn otsu_threshold(scores: &SimilarityMap, bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::param(format!(
            "Otsu needs at least 2 bins, got {bins}"
        )));
    }
    let mut hist = vec![0u64; bins];
    for &s in &scores.scores {
        hist[score_bin(s, bins)] += 1;
    }
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::DegenerateHistogram(format!(
            "all {} scores fall in one of {bins} bins",
            scores.scores.len()
        )));
    }

    let total_n: u64 = hist.iter().sum();
    let total_s: u64 = hist.iter().enumerate().map(|(b, &c)| b as u64 * c).sum();
    let (mut n0, mut s0) = (0u64, 0u64);
    let mut best: Option<(SplitScore, usize)> = None;
    for k in 1..bins {
        n0 += hist[k - 1];
        s0 += (k as u64 - 1) * hist[k - 1];
        let score = SplitScore::new(n0, s0, total_n, total_s);
        if best.as_ref().is_none_or(|(b, _)| score.beats(b)) {
            best = Some((score, k));
        }
    }
    let (_, k) = best.expect("at least one candidate edge");
    Ok(bin_edge(k, bins))
}

/// Between-class variance as the exact fraction `d^2 / p`, with
/// `d = N s0 - n0 S` and `p = n0 (N - n0)`, proportional to
/// [`between_class_variance`]. Comparing fractions by cross-multiplication
/// keeps ties exact; only histograms too large for 128-bit products fall
/// back to floating point.
struct SplitScore {
    d2: Option<u128>,
    p: u128,
    approx: f64,
}

impl SplitScore {
    fn new(n0: u64, s0: u64, total_n: u64, total_s: u64) -> Self {
        let n1 = total_n - n0;
        let approx = between_class_variance(n0, s0, n1, total_s - s0);
        if n0 == 0 || n1 == 0 {
            return Self {
                d2: Some(0),
                p: 1,
                approx,
            };
        }
        let d = (i128::from(total_n) * i128::from(s0) - i128::from(n0) * i128::from(total_s))
            .unsigned_abs();
        Self {
            d2: d.checked_mul(d),
            p: u128::from(n0) * u128::from(n1),
            approx,
        }
    }

    fn beats(&self, other: &SplitScore) -> bool {
        let exact = self
            .d2
            .zip(other.d2)
            .and_then(|(a, b)| Some((a.checked_mul(other.p)?, b.checked_mul(self.p)?)));
        match exact {
            Some((lhs, rhs)) => lhs > rhs,
            None => self.approx > other.approx,
        }
    }
}

/// Marks cells scoring strictly below `threshold` as edited.
pub fn binarize(scores: &SimilarityMap, threshold: f64) -> EditMask {
    EditMask {
        width: scores.grid_w,
        height: scores.grid_h,
        bits: scores
            .scores
            .iter()
            .map(|&s| u8::from(s < threshold))
            .collect(),
    }
}

/// Nearest-neighbour resampling sampling source pixel centres.
pub fn resize_mask(mask: &EditMask, out_w: usize, out_h: usize) -> Result<EditMask> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::param("mask output size must be positive"));
    }
    let src = |o: usize, out: usize, len: usize| ((2 * o + 1) * len / (2 * out)).min(len - 1);
    let cols: Vec<usize> = (0..out_w).map(|x| src(x, out_w, mask.width)).collect();
    let mut bits = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let row = src(y, out_h, mask.height) * mask.width;
        bits.extend(cols.iter().map(|&c| mask.bits[row + c]));
    }
    Ok(EditMask {
        width: out_w,
        height: out_h,
        bits,
    })
}

/// Where the dense features for a pair come from.
#[derive(Debug, Clone)]
pub enum FeatureSource {
    Builtin {
        patch_size: usize,
    },
    Precomputed {
        id: String,
        original: DenseFeatureMap,
        edited: DenseFeatureMap,
    },
}

impl FeatureSource {
    pub fn id(&self) -> String {
        match self {
            FeatureSource::Builtin { patch_size } => format!("builtin:patch{patch_size}"),
            FeatureSource::Precomputed { id, .. } => id.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub bins: usize,
    pub out_w: usize,
    pub out_h: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            bins: DEFAULT_OTSU_BINS,
            out_w: MASK_SIZE,
            out_h: MASK_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub threshold: f64,
    pub edited_fraction: f64,
    pub feature_source: String,
    pub grid_h: usize,
    pub grid_w: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MaskTimings {
    pub features: Duration,
    pub similarity: Duration,
}

pub fn annotate_masks(
    aligned_original: &ImageBuffer,
    aligned_edited: &ImageBuffer,
    source: &FeatureSource,
    cfg: &MaskConfig,
) -> Result<(EditMask, MaskStats)> {
    annotate_masks_timed(aligned_original, aligned_edited, source, cfg)
        .map(|(mask, stats, _)| (mask, stats))
}

/// [`annotate_masks`], also reporting time spent on features versus
/// similarity and thresholding.
pub fn annotate_masks_timed(
    aligned_original: &ImageBuffer,
    aligned_edited: &ImageBuffer,
    source: &FeatureSource,
    cfg: &MaskConfig,
) -> Result<(EditMask, MaskStats, MaskTimings)> {
    if (aligned_original.width(), aligned_original.height())
        != (aligned_edited.width(), aligned_edited.height())
    {
        return Err(Error::param(format!(
            "aligned images differ in size: {}x{} vs {}x{}",
            aligned_original.width(),
            aligned_original.height(),
            aligned_edited.width(),
            aligned_edited.height()
        )));
    }
    let started = Instant::now();
    let built;
    let (fa, fb) = match source {
        FeatureSource::Builtin { patch_size } => {
            built = (
                extract_features_builtin(aligned_original, *patch_size)?,
                extract_features_builtin(aligned_edited, *patch_size)?,
            );
            (&built.0, &built.1)
        }
        FeatureSource::Precomputed {
            original, edited, ..
        } => (original, edited),
    };
    let features = started.elapsed();

    let started = Instant::now();
    let sim = cosine_similarity_map(fa, fb)?;
    let threshold = otsu_threshold(&sim, cfg.bins)?;
    let grid_mask = binarize(&sim, threshold);
    let mask = resize_mask(&grid_mask, cfg.out_w, cfg.out_h)?;
    let similarity = started.elapsed();

    let stats = MaskStats {
        threshold,
        edited_fraction: mask.edited_fraction(),
        feature_source: source.id(),
        grid_h: sim.grid_h,
        grid_w: sim.grid_w,
    };
    Ok((
        mask,
        stats,
        MaskTimings {
            features,
            similarity,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(grid_h: usize, grid_w: usize, dim: usize, values: Vec<f32>) -> DenseFeatureMap {
        DenseFeatureMap::new(grid_h, grid_w, dim, 16, values).unwrap()
    }

    fn sim(scores: Vec<f64>) -> SimilarityMap {
        let n = scores.len();
        SimilarityMap::new(1, n, scores).unwrap()
    }

    /// Exhaustive scan: every candidate edge recomputes class statistics from
    /// the raw scores.
    fn otsu_oracle(scores: &[f64], bins: usize) -> f64 {
        let mut best = (f64::NEG_INFINITY, 0);
        for k in 1..bins {
            let (mut n0, mut s0, mut n1, mut s1) = (0u64, 0u64, 0u64, 0u64);
            for &s in scores {
                let b = score_bin(s, bins) as u64;
                if (b as usize) < k {
                    n0 += 1;
                    s0 += b;
                } else {
                    n1 += 1;
                    s1 += b;
                }
            }
            let v = between_class_variance(n0, s0, n1, s1);
            if v > best.0 {
                best = (v, k);
            }
        }
        bin_edge(best.1, bins)
    }

    #[test]
    fn cosine_examples() {
        let a = map(1, 2, 2, vec![1.0, 0.0, 1.0, 1.0]);
        let b = map(1, 2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let s = cosine_similarity_map(&a, &b).unwrap();
        assert_eq!(s.scores()[0], 0.0);
        assert!((s.scores()[1] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        let self_sim = cosine_similarity_map(&a, &a).unwrap();
        assert!(self_sim.scores().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn zero_vectors_score_zero() {
        let a = map(1, 1, 3, vec![0.0; 3]);
        let b = map(1, 1, 3, vec![1.0, 2.0, 3.0]);
        assert_eq!(cosine_similarity_map(&a, &b).unwrap().scores(), &[0.0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = map(1, 2, 2, vec![0.0; 4]);
        let b = map(2, 1, 2, vec![0.0; 4]);
        assert!(matches!(
            cosine_similarity_map(&a, &b),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn otsu_separates_bimodal_scores() {
        let mut scores = vec![-0.8; 50];
        scores.extend(vec![0.9; 50]);
        let t = otsu_threshold(&sim(scores.clone()), 256).unwrap();
        assert!(t > -0.8 && t < 0.9, "{t}");
        assert_eq!(t, otsu_oracle(&scores, 256));
        // Every edge between the two modes ties; the lowest one wins.
        assert_eq!(t, bin_edge(score_bin(-0.8, 256) + 1, 256));
    }

    #[test]
    fn otsu_rejects_constant_maps() {
        assert!(matches!(
            otsu_threshold(&sim(vec![0.3; 20]), 256),
            Err(Error::DegenerateHistogram(_))
        ));
        assert!(otsu_threshold(&sim(vec![0.1, 0.2]), 1).is_err());
    }

    #[test]
    fn binarize_examples() {
        let s = sim(vec![0.2, 0.8]);
        assert_eq!(binarize(&s, 0.5).bits(), &[1, 0]);
        assert_eq!(binarize(&s, -1.0).count_edited(), 0);
        assert_eq!(binarize(&s, 0.81).count_edited(), 2);
    }

    #[test]
    fn resize_examples() {
        let m = EditMask::new(2, 2, vec![1, 0, 0, 0]).unwrap();
        assert_eq!(resize_mask(&m, 2, 2).unwrap(), m);
        let big = resize_mask(&m, 4, 4).unwrap();
        let expected = EditMask::from_fn(4, 4, |x, y| x < 2 && y < 2).unwrap();
        assert_eq!(big, expected);
        let ones = EditMask::new(3, 5, vec![1; 15]).unwrap();
        assert_eq!(
            resize_mask(&ones, 128, 128).unwrap().count_edited(),
            128 * 128
        );
    }

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = EditMask::from_fn(9, 7, |x, y| (x + y) % 3 == 0).unwrap();
        let path = dir.path().join("m.png");
        m.write_png(&path).unwrap();
        assert_eq!(EditMask::read_png(&path).unwrap(), m);
        let img = read_image(&path).unwrap();
        assert!(img.data().iter().all(|&v| v == 0 || v == 255));
    }

    #[test]
    fn otsu_matches_oracle_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rng.random_range(2..400);
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    if rng.random_bool(0.3) {
                        rng.random_range(-1.0..0.4)
                    } else {
                        rng.random_range(0.6..=1.0)
                    }
                })
                .collect();
            match otsu_threshold(&sim(scores.clone()), 256) {
                Ok(t) => assert_eq!(t, otsu_oracle(&scores, 256)),
                Err(Error::DegenerateHistogram(_)) => {}
                Err(e) => panic!("{e}"),
            }
        }
    }

    proptest! {
        #[test]
        fn cosine_is_scale_invariant(
            values in proptest::collection::vec(-5.0f32..5.0, 24),
            other in proptest::collection::vec(-5.0f32..5.0, 24),
            scale in 0.01f32..100.0,
        ) {
            let a = map(2, 3, 4, values.clone());
            let scaled = map(2, 3, 4, values.iter().map(|v| v * scale).collect());
            let b = map(2, 3, 4, other);
            let s1 = cosine_similarity_map(&a, &b).unwrap();
            let s2 = cosine_similarity_map(&scaled, &b).unwrap();
            for (x, y) in s1.scores().iter().zip(s2.scores()) {
                prop_assert!((x - y).abs() <= 1e-6);
                prop_assert!((-1.0..=1.0).contains(x));
            }
        }

        #[test]
        fn binarize_is_monotone(
            scores in proptest::collection::vec(-1.0f64..=1.0, 1..64),
            t1 in -1.0f64..=1.0,
            t2 in -1.0f64..=1.0,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let s = sim(scores);
            let (a, b) = (binarize(&s, lo), binarize(&s, hi));
            prop_assert!(a.bits().iter().zip(b.bits()).all(|(&x, &y)| x <= y));
        }

        #[test]
        fn integer_upscaling_preserves_area(
            w in 1usize..12, h in 1usize..12, kx in 1usize..6, ky in 1usize..6, seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = EditMask::from_fn(w, h, |_, _| rng.random_bool(0.4)).unwrap();
            let up = resize_mask(&m, w * kx, h * ky).unwrap();
            prop_assert!(up.bits().iter().all(|&b| b <= 1));
            prop_assert_eq!(up.count_edited(), m.count_edited() * kx * ky);
        }
    }
}
