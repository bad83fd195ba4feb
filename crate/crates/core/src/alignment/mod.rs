//! Pixel-level registration of an edited image onto its original.
//!
//! Keypoints from both images are matched, a coarse affine map is found with
//! RANSAC and refined by least squares on the inliers, the original is warped
//! into the edited image's frame, and both are cropped to the region free of
//! warp borders.

mod affine;
mod matcher;
mod orb;
mod warp;

use serde::{Deserialize, Serialize};

pub use affine::{
    affine_from_three, estimate_affine_ransac, refine_affine_least_squares, AffineTransform,
    PointPair, RansacConfig, RansacResult, DEFAULT_RANSAC_ITERATIONS, DEFAULT_REPROJ_THRESHOLD,
    DEFAULT_SEED, MIN_ABS_DET,
};
pub use matcher::{match_descriptors, Match, DEFAULT_RATIO};
pub use orb::{
    detect_keypoints, detect_keypoints_with, BinaryDescriptor, DetectorConfig, Keypoint,
    DEFAULT_FAST_THRESHOLD, DEFAULT_MAX_KEYPOINTS, MIN_DETECT_DIM,
};
pub use warp::{compute_common_crop, source_inside, warp_affine};

use crate::error::Error;
use crate::imagecore::{crop, to_grayscale, ImageBuffer, Rect};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub detector: DetectorConfig,
    pub ratio: f64,
    pub ransac: RansacConfig,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::default(),
            ratio: DEFAULT_RATIO,
            ransac: RansacConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignStage {
    Detection,
    Matching,
    Estimation,
    Warp,
    Crop,
}

impl std::fmt::Display for AlignStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AlignStage::Detection => "detection",
            AlignStage::Matching => "matching",
            AlignStage::Estimation => "estimation",
            AlignStage::Warp => "warp",
            AlignStage::Crop => "crop",
        })
    }
}

/// Per-pair alignment provenance. Fields after the failing stage stay
/// `None` in a [`AlignmentFailure`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignmentStats {
    pub keypoints_original: Option<usize>,
    pub keypoints_edited: Option<usize>,
    pub matches: Option<usize>,
    pub inliers: Option<usize>,
    pub inlier_ratio: Option<f64>,
    pub coarse: Option<AffineTransform>,
    pub refined: Option<AffineTransform>,
    /// Set when least squares failed or did worse than the coarse model, in
    /// which case `refined` holds the coarse coefficients.
    pub refinement_fallback: bool,
    pub crop: Option<Rect>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("alignment failed at {stage}: {reason}")]
pub struct AlignmentFailure {
    pub stage: AlignStage,
    pub reason: String,
    pub stats: AlignmentStats,
}

#[derive(Debug, Clone)]
pub struct AlignedPair {
    pub original: ImageBuffer,
    pub edited: ImageBuffer,
    pub stats: AlignmentStats,
}

impl AlignedPair {
    pub fn transform(&self) -> AffineTransform {
        self.stats.refined.expect("set on success")
    }

    pub fn crop_rect(&self) -> Rect {
        self.stats.crop.expect("set on success")
    }
}

/// Registers `original` onto `edited` and crops both to their common valid
/// region.
pub fn align_pair(
    original: &ImageBuffer,
    edited: &ImageBuffer,
    cfg: &AlignConfig,
) -> Result<AlignedPair, Box<AlignmentFailure>> {
    let mut stats = AlignmentStats::default();
    let fail = |stage, reason: String, stats: &AlignmentStats| {
        Box::new(AlignmentFailure {
            stage,
            reason,
            stats: stats.clone(),
        })
    };

    let detect = |img: &ImageBuffer| detect_keypoints_with(&to_grayscale(img), &cfg.detector);
    let kp_orig =
        detect(original).map_err(|e| fail(AlignStage::Detection, e.to_string(), &stats))?;
    stats.keypoints_original = Some(kp_orig.len());
    let kp_edit = detect(edited).map_err(|e| fail(AlignStage::Detection, e.to_string(), &stats))?;
    stats.keypoints_edited = Some(kp_edit.len());
    if kp_orig.is_empty() || kp_edit.is_empty() {
        return Err(fail(
            AlignStage::Detection,
            format!(
                "no keypoints found (original {}, edited {})",
                kp_orig.len(),
                kp_edit.len()
            ),
            &stats,
        ));
    }

    let desc_orig: Vec<_> = kp_orig.iter().map(|(_, d)| *d).collect();
    let desc_edit: Vec<_> = kp_edit.iter().map(|(_, d)| *d).collect();
    let matches = match_descriptors(&desc_orig, &desc_edit, cfg.ratio)
        .map_err(|e| fail(AlignStage::Matching, e.to_string(), &stats))?;
    stats.matches = Some(matches.len());

    let pairs: Vec<PointPair> = matches
        .iter()
        .map(|m| {
            let (a, b) = (&kp_orig[m.query_idx].0, &kp_edit[m.train_idx].0);
            PointPair::new(
                (f64::from(a.x), f64::from(a.y)),
                (f64::from(b.x), f64::from(b.y)),
            )
        })
        .collect();
    let coarse = estimate_affine_ransac(&pairs, &cfg.ransac)
        .map_err(|e| fail(AlignStage::Estimation, e.to_string(), &stats))?;
    stats.inliers = Some(coarse.inlier_count());
    stats.inlier_ratio = Some(coarse.inlier_ratio);
    stats.coarse = Some(coarse.transform);

    let inliers: Vec<PointPair> = coarse.inliers(&pairs).copied().collect();
    let refined = match refine_affine_least_squares(&inliers) {
        Ok(t)
            if t.is_invertible() && t.residual(&inliers) <= coarse.transform.residual(&inliers) =>
        {
            t
        }
        _ => {
            stats.refinement_fallback = true;
            coarse.transform
        }
    };
    stats.refined = Some(refined);

    let warped = warp_affine(original, &refined, edited.width(), edited.height())
        .map_err(|e| fail(AlignStage::Warp, e.to_string(), &stats))?;
    let rect = compute_common_crop(
        &refined,
        original.width(),
        original.height(),
        edited.width(),
        edited.height(),
    )
    .map_err(|e| fail(AlignStage::Crop, e.to_string(), &stats))?;
    stats.crop = Some(rect);

    let cut = |img: &ImageBuffer| {
        crop(img, rect).map_err(|e: Error| fail(AlignStage::Crop, e.to_string(), &stats))
    };
    Ok(AlignedPair {
        original: cut(&warped)?,
        edited: cut(edited)?,
        stats,
    })
}
