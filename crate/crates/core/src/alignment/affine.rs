use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_RANSAC_ITERATIONS: usize = 2000;
pub const DEFAULT_REPROJ_THRESHOLD: f64 = 3.0;
pub const DEFAULT_SEED: u64 = 0x5EED;

/// Below this the 2x2 linear part is treated as singular.
pub const MIN_ABS_DET: f64 = 1e-8;

/// Twice the signed area under which a sampled triangle counts as collinear.
const MIN_SAMPLE_AREA: f64 = 1e-6;

/// Six-parameter affine map `(x, y) -> (a1 x + a2 y + a3, a4 x + a5 y + a6)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AffineTransform(pub [f64; 6]);

impl AffineTransform {
    pub const IDENTITY: AffineTransform = AffineTransform([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn new(a1: f64, a2: f64, a3: f64, a4: f64, a5: f64, a6: f64) -> Self {
        Self([a1, a2, a3, a4, a5, a6])
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self([1.0, 0.0, tx, 0.0, 1.0, ty])
    }

    pub fn coefficients(&self) -> [f64; 6] {
        self.0
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let a = &self.0;
        (a[0] * x + a[1] * y + a[2], a[3] * x + a[4] * y + a[5])
    }

    pub fn det(&self) -> f64 {
        self.0[0] * self.0[4] - self.0[1] * self.0[3]
    }

    pub fn is_invertible(&self) -> bool {
        let d = self.det();
        d.is_finite() && d.abs() > MIN_ABS_DET
    }

    pub fn inverse(&self) -> Option<AffineTransform> {
        if !self.is_invertible() {
            return None;
        }
        let [a1, a2, a3, a4, a5, a6] = self.0;
        let d = self.det();
        let (b1, b2, b4, b5) = (a5 / d, -a2 / d, -a4 / d, a1 / d);
        Some(AffineTransform([
            b1,
            b2,
            -(b1 * a3 + b2 * a6),
            b4,
            b5,
            -(b4 * a3 + b5 * a6),
        ]))
    }

    /// `self` applied after `first`.
    pub fn compose(&self, first: &AffineTransform) -> AffineTransform {
        let [a1, a2, a3, a4, a5, a6] = self.0;
        let [b1, b2, b3, b4, b5, b6] = first.0;
        AffineTransform([
            a1 * b1 + a2 * b4,
            a1 * b2 + a2 * b5,
            a1 * b3 + a2 * b6 + a3,
            a4 * b1 + a5 * b4,
            a4 * b2 + a5 * b5,
            a4 * b3 + a5 * b6 + a6,
        ])
    }

    /// Euclidean distance between `self(pair.src)` and `pair.dst`.
    pub fn reprojection_error(&self, pair: &PointPair) -> f64 {
        let (x, y) = self.apply(pair.src.0, pair.src.1);
        (x - pair.dst.0).hypot(y - pair.dst.1)
    }

    /// Sum of squared reprojection errors.
    pub fn residual(&self, pairs: &[PointPair]) -> f64 {
        pairs
            .iter()
            .map(|p| {
                let e = self.reprojection_error(p);
                e * e
            })
            .sum()
    }
}

/// A correspondence: `src` in the original image, `dst` in the edited one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointPair {
    pub src: (f64, f64),
    pub dst: (f64, f64),
}

impl PointPair {
    pub fn new(src: (f64, f64), dst: (f64, f64)) -> Self {
        Self { src, dst }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub iterations: usize,
    pub reproj_threshold: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: DEFAULT_RANSAC_ITERATIONS,
            reproj_threshold: DEFAULT_REPROJ_THRESHOLD,
            seed: DEFAULT_SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub transform: AffineTransform,
    pub inlier_flags: Vec<bool>,
    pub inlier_ratio: f64,
}

impl RansacResult {
    pub fn inlier_count(&self) -> usize {
        self.inlier_flags.iter().filter(|&&f| f).count()
    }

    pub fn inliers<'a>(&'a self, pairs: &'a [PointPair]) -> impl Iterator<Item = &'a PointPair> {
        pairs
            .iter()
            .zip(&self.inlier_flags)
            .filter_map(|(p, &f)| f.then_some(p))
    }
}

/// Exact affine through three correspondences, or `None` when the source
/// points are (nearly) collinear.
pub fn affine_from_three(pairs: &[PointPair; 3]) -> Option<AffineTransform> {
    let [(x1, y1), (x2, y2), (x3, y3)] = [pairs[0].src, pairs[1].src, pairs[2].src];
    let det = x1 * (y2 - y3) - y1 * (x2 - x3) + (x2 * y3 - x3 * y2);
    if !det.is_finite() || det.abs() < MIN_SAMPLE_AREA {
        return None;
    }
    // Cramer's rule on [x y 1] * [c1 c2 c3]^T = v, once per output coordinate.
    let solve = |v1: f64, v2: f64, v3: f64| {
        let c1 = (v1 * (y2 - y3) - y1 * (v2 - v3) + (v2 * y3 - v3 * y2)) / det;
        let c2 = (x1 * (v2 - v3) - v1 * (x2 - x3) + (x2 * v3 - x3 * v2)) / det;
        let c3 =
            (x1 * (y2 * v3 - y3 * v2) - y1 * (x2 * v3 - x3 * v2) + v1 * (x2 * y3 - x3 * y2)) / det;
        (c1, c2, c3)
    };
    let (a1, a2, a3) = solve(pairs[0].dst.0, pairs[1].dst.0, pairs[2].dst.0);
    let (a4, a5, a6) = solve(pairs[0].dst.1, pairs[1].dst.1, pairs[2].dst.1);
    let t = AffineTransform([a1, a2, a3, a4, a5, a6]);
    t.is_invertible().then_some(t)
}

/// Robust affine fit over random minimal samples.
///
/// The winning hypothesis has the most pairs within `reproj_threshold`; ties
/// go to the lower summed inlier error, then to the earlier hypothesis.
pub fn estimate_affine_ransac(pairs: &[PointPair], cfg: &RansacConfig) -> Result<RansacResult> {
    if pairs.len() < 3 {
        return Err(Error::Estimation(format!(
            "need at least 3 correspondences, got {}",
            pairs.len()
        )));
    }
    if cfg.iterations == 0 {
        return Err(Error::param("RANSAC needs at least one iteration"));
    }
    if !(cfg.reproj_threshold > 0.0) {
        return Err(Error::param("reprojection threshold must be positive"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, f64, AffineTransform)> = None;
    for _ in 0..cfg.iterations {
        let idx = rand::seq::index::sample(&mut rng, pairs.len(), 3);
        let sample = [
            pairs[idx.index(0)],
            pairs[idx.index(1)],
            pairs[idx.index(2)],
        ];
        let Some(model) = affine_from_three(&sample) else {
            continue;
        };
        let (count, total) = score(&model, pairs, cfg.reproj_threshold);
        let better = match &best {
            None => true,
            Some((bc, be, _)) => count > *bc || (count == *bc && total < *be),
        };
        if better {
            best = Some((count, total, model));
        }
    }

    let Some((count, _, transform)) = best else {
        return Err(Error::Estimation(
            "every sampled triple was collinear".into(),
        ));
    };
    if count < 3 {
        return Err(Error::Estimation(format!(
            "best model has only {count} inliers"
        )));
    }
    let inlier_flags: Vec<bool> = pairs
        .iter()
        .map(|p| transform.reprojection_error(p) <= cfg.reproj_threshold)
        .collect();
    Ok(RansacResult {
        transform,
        inlier_ratio: count as f64 / pairs.len() as f64,
        inlier_flags,
    })
}

fn score(model: &AffineTransform, pairs: &[PointPair], threshold: f64) -> (usize, f64) {
    pairs
        .iter()
        .map(|p| model.reprojection_error(p))
        .filter(|&e| e <= threshold)
        .fold((0, 0.0), |(n, s), e| (n + 1, s + e))
}

/// Least-squares affine over all pairs.
///
/// Source points are centred and scaled before forming the normal
/// equations, which keeps the 3x3 system well conditioned for pixel-sized
/// coordinates.
pub fn refine_affine_least_squares(pairs: &[PointPair]) -> Result<AffineTransform> {
    if pairs.len() < 3 {
        return Err(Error::Refinement(format!(
            "need at least 3 pairs, got {}",
            pairs.len()
        )));
    }
    let n = pairs.len() as f64;
    let (mx, my) = pairs
        .iter()
        .fold((0.0, 0.0), |(sx, sy), p| (sx + p.src.0, sy + p.src.1));
    let (mx, my) = (mx / n, my / n);
    let spread = (pairs
        .iter()
        .map(|p| (p.src.0 - mx).powi(2) + (p.src.1 - my).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    if !(spread > 0.0) || !spread.is_finite() {
        return Err(Error::Refinement("all source points coincide".into()));
    }

    // With centred coordinates the normal matrix is block diagonal:
    // [[sxx, sxy, 0], [sxy, syy, 0], [0, 0, n]].
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    let (mut bx, mut by) = ([0.0f64; 3], [0.0f64; 3]);
    for p in pairs {
        let u = (p.src.0 - mx) / spread;
        let v = (p.src.1 - my) / spread;
        sxx += u * u;
        sxy += u * v;
        syy += v * v;
        for (b, t) in [(&mut bx, p.dst.0), (&mut by, p.dst.1)] {
            b[0] += u * t;
            b[1] += v * t;
            b[2] += t;
        }
    }
    let det = sxx * syy - sxy * sxy;
    if !(det > 1e-12 * n * n) {
        return Err(Error::Refinement(
            "source points are collinear; normal equations are rank deficient".into(),
        ));
    }
    let solve = |b: [f64; 3]| {
        let c1 = (syy * b[0] - sxy * b[1]) / det;
        let c2 = (sxx * b[1] - sxy * b[0]) / det;
        let c3 = b[2] / n;
        // Undo the normalisation: t = c1 (x - mx)/s + c2 (y - my)/s + c3.
        (c1 / spread, c2 / spread, c3 - (c1 * mx + c2 * my) / spread)
    };
    let (a1, a2, a3) = solve(bx);
    let (a4, a5, a6) = solve(by);
    let t = AffineTransform([a1, a2, a3, a4, a5, a6]);
    if !t.0.iter().all(|c| c.is_finite()) {
        return Err(Error::Refinement("non-finite coefficients".into()));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    const KNOWN: AffineTransform = AffineTransform([1.1, 0.02, 5.0, -0.01, 0.98, -3.0]);

    fn exact_pairs(t: &AffineTransform, n: usize, seed: u64) -> Vec<PointPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let src = (rng.random_range(0.0..500.0), rng.random_range(0.0..400.0));
                PointPair::new(src, t.apply(src.0, src.1))
            })
            .collect()
    }

    fn assert_close(a: &AffineTransform, b: &AffineTransform, tol: f64) {
        for (x, y) in a.0.iter().zip(&b.0) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn inverse_and_compose() {
        let inv = KNOWN.inverse().unwrap();
        assert_close(&KNOWN.compose(&inv), &AffineTransform::IDENTITY, 1e-12);
        assert!(AffineTransform::new(1.0, 2.0, 0.0, 2.0, 4.0, 0.0)
            .inverse()
            .is_none());
    }

    #[test]
    fn exact_correspondences_are_recovered() {
        let pairs = exact_pairs(&KNOWN, 50, 1);
        let r = estimate_affine_ransac(&pairs, &RansacConfig::default()).unwrap();
        assert_close(&r.transform, &KNOWN, 1e-6);
        assert_eq!(r.inlier_ratio, 1.0);
        assert!(r.inlier_flags.iter().all(|&f| f));
    }

    #[test]
    fn outliers_are_flagged() {
        let mut pairs = exact_pairs(&KNOWN, 50, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            pairs.push(PointPair::new(
                (rng.random_range(0.0..500.0), rng.random_range(0.0..400.0)),
                (rng.random_range(0.0..560.0), rng.random_range(0.0..400.0)),
            ));
        }
        let r = estimate_affine_ransac(&pairs, &RansacConfig::default()).unwrap();
        assert!(r.inlier_flags[..50].iter().all(|&f| f));
        assert!(r.inlier_flags[50..].iter().all(|&f| !f));
        assert_eq!(r.inlier_count(), 50);
    }

    #[test]
    fn collinear_points_fail() {
        let pairs: Vec<_> = (0..3)
            .map(|i| {
                let p = (i as f64 * 10.0, i as f64 * 5.0);
                PointPair::new(p, p)
            })
            .collect();
        assert!(matches!(
            estimate_affine_ransac(&pairs, &RansacConfig::default()),
            Err(Error::Estimation(_))
        ));
        assert!(matches!(
            refine_affine_least_squares(&pairs),
            Err(Error::Refinement(_))
        ));
    }

    #[test]
    fn too_few_pairs_fail() {
        let p = PointPair::new((0.0, 0.0), (1.0, 1.0));
        assert!(estimate_affine_ransac(&[p, p], &RansacConfig::default()).is_err());
        assert!(refine_affine_least_squares(&[p, p]).is_err());
    }

    #[test]
    fn least_squares_exact_and_identity() {
        let pairs = exact_pairs(&KNOWN, 40, 4);
        assert_close(&refine_affine_least_squares(&pairs).unwrap(), &KNOWN, 1e-9);
        let ident: Vec<_> = exact_pairs(&AffineTransform::IDENTITY, 10, 5);
        assert_close(
            &refine_affine_least_squares(&ident).unwrap(),
            &AffineTransform::IDENTITY,
            1e-12,
        );
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let mut pairs = exact_pairs(&KNOWN, 30, 6);
        pairs.extend(exact_pairs(&AffineTransform::translation(40.0, 0.0), 15, 7));
        let cfg = RansacConfig::default();
        assert_eq!(
            estimate_affine_ransac(&pairs, &cfg).unwrap(),
            estimate_affine_ransac(&pairs, &cfg).unwrap()
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn flags_match_the_coarse_model(seed in any::<u64>(), outliers in 0usize..30) {
            let mut pairs = exact_pairs(&KNOWN, 25, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
            for _ in 0..outliers {
                pairs.push(PointPair::new(
                    (rng.random_range(0.0..500.0), rng.random_range(0.0..400.0)),
                    (rng.random_range(0.0..500.0), rng.random_range(0.0..400.0)),
                ));
            }
            let cfg = RansacConfig { iterations: 300, ..RansacConfig::default() };
            let r = estimate_affine_ransac(&pairs, &cfg).unwrap();
            for (p, &flag) in pairs.iter().zip(&r.inlier_flags) {
                prop_assert_eq!(flag, r.transform.reprojection_error(p) <= cfg.reproj_threshold);
            }
            prop_assert_eq!(r.inlier_ratio, r.inlier_count() as f64 / pairs.len() as f64);

            let inliers: Vec<_> = r.inliers(&pairs).copied().collect();
            let refined = refine_affine_least_squares(&inliers).unwrap();
            prop_assert!(refined.residual(&inliers) <= r.transform.residual(&inliers) * (1.0 + 1e-9) + 1e-9);
        }
    }
}
