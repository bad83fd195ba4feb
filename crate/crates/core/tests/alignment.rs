use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use forgemask::alignment::{
    align_pair, estimate_affine_ransac, refine_affine_least_squares, AffineTransform, AlignConfig,
    AlignStage, PointPair, RansacConfig,
};
use forgemask::imagecore::{crop, Channels, ImageBuffer, Rect};
use forgemask::synth::{synthetic_warp_pair, textured_scene};

/// Least squares through the Moore-Penrose pseudo-inverse of the design
/// matrix `[x y 1]`, one solve per output coordinate.
fn pinv_fit(pairs: &[PointPair]) -> AffineTransform {
    let n = pairs.len();
    let design = DMatrix::from_fn(n, 3, |i, j| match j {
        0 => pairs[i].src.0,
        1 => pairs[i].src.1,
        _ => 1.0,
    });
    let pinv = design.pseudo_inverse(1e-12).unwrap();
    let u = &pinv * DVector::from_fn(n, |i, _| pairs[i].dst.0);
    let v = &pinv * DVector::from_fn(n, |i, _| pairs[i].dst.1);
    AffineTransform::new(u[0], u[1], u[2], v[0], v[1], v[2])
}

#[test]
fn least_squares_matches_pseudo_inverse_under_noise() {
    let truth = AffineTransform::new(0.96, 0.04, 14.0, -0.03, 1.05, -6.0);
    let noise = Normal::new(0.0, 0.5).unwrap();
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs: Vec<PointPair> = (0..200)
            .map(|_| {
                let (x, y) = (rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
                let (u, v) = truth.apply(x, y);
                PointPair::new(
                    (x, y),
                    (u + noise.sample(&mut rng), v + noise.sample(&mut rng)),
                )
            })
            .collect();
        let ours = refine_affine_least_squares(&pairs).unwrap();
        let oracle = pinv_fit(&pairs);
        for (a, b) in ours.coefficients().iter().zip(oracle.coefficients()) {
            assert_relative_eq!(*a, b, epsilon = 1e-9, max_relative = 1e-9);
        }
        // The fit minimises the squared error, so it does at least as well
        // as the generating transform on the noisy data.
        assert!(ours.residual(&pairs) <= truth.residual(&pairs) + 1e-12);
        // Noise of half a pixel over 200 points moves the linear part by
        // well under a percent.
        for (a, b) in ours.coefficients().iter().zip(truth.coefficients()).take(2) {
            assert!((a - b).abs() < 0.01);
        }
    }
}

#[test]
fn refinement_never_worse_than_ransac_model() {
    let truth = AffineTransform::new(1.02, -0.05, 3.0, 0.04, 0.99, 7.0);
    let noise = Normal::new(0.0, 0.7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut pairs: Vec<PointPair> = (0..120)
        .map(|_| {
            let (x, y) = (rng.random_range(0.0..400.0), rng.random_range(0.0..400.0));
            let (u, v) = truth.apply(x, y);
            PointPair::new(
                (x, y),
                (u + noise.sample(&mut rng), v + noise.sample(&mut rng)),
            )
        })
        .collect();
    pairs.extend((0..40).map(|_| {
        PointPair::new(
            (rng.random_range(0.0..400.0), rng.random_range(0.0..400.0)),
            (rng.random_range(0.0..400.0), rng.random_range(0.0..400.0)),
        )
    }));
    let coarse = estimate_affine_ransac(&pairs, &RansacConfig::default()).unwrap();
    let inliers: Vec<PointPair> = coarse.inliers(&pairs).copied().collect();
    let refined = refine_affine_least_squares(&inliers).unwrap();
    assert!(refined.residual(&inliers) <= coarse.transform.residual(&inliers));
    assert!(coarse.inlier_count() >= 110);
}

#[test]
fn identical_pair_aligns_to_identity() {
    let img = textured_scene(320, 256, 8);
    let aligned = align_pair(&img, &img, &AlignConfig::default()).unwrap();
    for (a, b) in aligned
        .transform()
        .coefficients()
        .iter()
        .zip(AffineTransform::IDENTITY.coefficients())
    {
        assert!((a - b).abs() < 0.01, "{:?}", aligned.transform());
    }
    assert_eq!(aligned.crop_rect(), img.full_rect());
    assert_eq!(aligned.stats.inlier_ratio, Some(1.0));
}

#[test]
fn border_crop_is_recovered_as_translation() {
    let img = textured_scene(320, 256, 21);
    let edited = crop(&img, Rect::new(8, 8, 304, 240)).unwrap();
    let aligned = align_pair(&img, &edited, &AlignConfig::default()).unwrap();
    let [a1, a2, a3, a4, a5, a6] = aligned.transform().coefficients();
    assert!(
        (a1 - 1.0).abs() < 0.01 && a2.abs() < 0.01 && (a5 - 1.0).abs() < 0.01 && a4.abs() < 0.01
    );
    assert!(
        (a3 + 8.0).abs() < 0.25 && (a6 + 8.0).abs() < 0.25,
        "{a3} {a6}"
    );
    // The original covers the whole edited frame, so at most a sliver is
    // lost to sub-pixel estimation error.
    let r = aligned.crop_rect();
    assert!(r.w >= 303 && r.h >= 239, "{r:?}");
}

#[test]
fn aligned_pairs_agree_within_the_crop() {
    for seed in [1u64, 2, 3] {
        let (original, edited, _) = synthetic_warp_pair(384, 384, seed, 20.0).unwrap();
        let aligned = align_pair(&original, &edited, &AlignConfig::default()).unwrap();
        let (a, b) = (aligned.original.data(), aligned.edited.data());
        let mad = a
            .iter()
            .zip(b)
            .map(|(&x, &y)| (f64::from(x) - f64::from(y)).abs())
            .sum::<f64>()
            / a.len() as f64;
        assert!(mad < 5.0, "seed {seed}: mean |diff| {mad:.2}");
        assert!(!aligned.stats.refinement_fallback);
    }
}

#[test]
fn flat_original_fails_at_detection() {
    let flat = ImageBuffer::filled(128, 128, Channels::Rgb, 128).unwrap();
    let err = align_pair(&flat, &textured_scene(128, 128, 1), &AlignConfig::default()).unwrap_err();
    assert_eq!(err.stage, AlignStage::Detection);
    assert_eq!(err.stats.keypoints_original, Some(0));
}
