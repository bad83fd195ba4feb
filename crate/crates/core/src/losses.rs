//! Reference numerics for the localisation training objective: intra-image
//! contrastive loss over forged/real pixel features, Dice and Focal
//! segmentation losses, and their weighted sum.
//!
//! Everything is computed in `f64` with no batching tricks, so external
//! training code can be checked against these values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::semanticmask::{DenseFeatureMap, EditMask};

pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_SAMPLE_CAP: usize = 4096;
pub const DICE_EPS: f64 = 1.0;
pub const DEFAULT_FOCAL_GAMMA: f64 = 2.0;
pub const DEFAULT_FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_CLAMP: f64 = 1e-7;

/// Loss weights `(contrastive, dice, focal)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub contrastive: f64,
    pub dice: f64,
    pub focal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            contrastive: 1.0,
            dice: 4.0,
            focal: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelFeatureSet {
    pub forged: Vec<Vec<f64>>,
    pub real: Vec<Vec<f64>>,
    pub tau: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let denom = na.sqrt() * nb.sqrt();
    if denom < crate::semanticmask::ZERO_NORM {
        0.0
    } else {
        dot / denom
    }
}

/// Intra-image contrastive loss.
///
/// For each forged anchor `i`:
/// `-log( mean_j exp(sim(f_i, f_j)/tau) / sum_k exp(sim(f_i, r_k)/tau) )`,
/// with `j` over all forged vectors including `i`, averaged over anchors.
/// Evaluated in log-space so small temperatures do not overflow.
pub fn contrastive_loss(s: &PixelFeatureSet) -> Result<f64> {
    if s.forged.is_empty() || s.real.is_empty() {
        return Err(Error::UndefinedLoss(format!(
            "need forged and real pixels, got {} and {}",
            s.forged.len(),
            s.real.len()
        )));
    }
    if !(s.tau > 0.0) || !s.tau.is_finite() {
        return Err(Error::param(format!(
            "temperature must be positive, got {}",
            s.tau
        )));
    }
    let dim = s.forged[0].len();
    if s.forged
        .iter()
        .chain(&s.real)
        .any(|v| v.len() != dim || v.iter().any(|x| !x.is_finite()))
    {
        return Err(Error::param(
            "feature vectors must be finite and equal length",
        ));
    }

    let n_f = s.forged.len() as f64;
    let mut total = 0.0;
    for anchor in &s.forged {
        let pos: Vec<f64> = s.forged.iter().map(|f| cosine(anchor, f) / s.tau).collect();
        let neg: Vec<f64> = s.real.iter().map(|r| cosine(anchor, r) / s.tau).collect();
        let log_num = log_sum_exp(&pos) - n_f.ln();
        let log_den = log_sum_exp(&neg);
        total += -(log_num - log_den);
    }
    Ok(total / n_f)
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Splits the feature grid into forged and real pixel vectors by `mask`,
/// subsampling each class to at most `cap` vectors without replacement.
pub fn sample_pixels(
    features: &DenseFeatureMap,
    mask: &EditMask,
    cap: usize,
    seed: u64,
    tau: f64,
) -> Result<PixelFeatureSet> {
    if (mask.width(), mask.height()) != (features.grid_w(), features.grid_h()) {
        return Err(Error::param(format!(
            "mask {}x{} does not match feature grid {}x{}",
            mask.width(),
            mask.height(),
            features.grid_w(),
            features.grid_h()
        )));
    }
    if cap == 0 {
        return Err(Error::param("sampling cap must be positive"));
    }
    let (mut forged_idx, mut real_idx) = (Vec::new(), Vec::new());
    for (i, &b) in mask.bits().iter().enumerate() {
        if b == 1 {
            forged_idx.push(i);
        } else {
            real_idx.push(i);
        }
    }
    if forged_idx.is_empty() || real_idx.is_empty() {
        return Err(Error::UndefinedLoss(format!(
            "mask has {} forged and {} real pixels",
            forged_idx.len(),
            real_idx.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subsample = |idx: Vec<usize>| -> Vec<usize> {
        if idx.len() <= cap {
            return idx;
        }
        let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, idx.len(), cap)
            .into_iter()
            .map(|i| idx[i])
            .collect();
        picked.sort_unstable();
        picked
    };
    let forged_idx = subsample(forged_idx);
    let real_idx = subsample(real_idx);
    let dim = features.dim();
    let vector = |i: usize| -> Vec<f64> {
        features.values()[i * dim..(i + 1) * dim]
            .iter()
            .map(|&v| f64::from(v))
            .collect()
    };
    Ok(PixelFeatureSet {
        forged: forged_idx.into_iter().map(vector).collect(),
        real: real_idx.into_iter().map(vector).collect(),
        tau,
    })
}

/// Predicted probabilities against a binary ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    predicted: Vec<f64>,
    truth: Vec<u8>,
}

impl MaskPair {
    pub fn new(predicted: Vec<f64>, truth: Vec<u8>) -> Result<Self> {
        if predicted.len() != truth.len() || predicted.is_empty() {
            return Err(Error::param(format!(
                "prediction has {} values, truth has {}",
                predicted.len(),
                truth.len()
            )));
        }
        if predicted.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::param("predictions must lie in [0, 1]"));
        }
        if truth.iter().any(|&t| t > 1) {
            return Err(Error::param("truth must be binary"));
        }
        Ok(Self { predicted, truth })
    }

    pub fn from_masks(predicted: &EditMask, truth: &EditMask) -> Result<Self> {
        Self::new(
            predicted.bits().iter().map(|&b| f64::from(b)).collect(),
            truth.bits().to_vec(),
        )
    }

    pub fn predicted(&self) -> &[f64] {
        &self.predicted
    }

    pub fn truth(&self) -> &[u8] {
        &self.truth
    }
}

/// `1 - (2 sum(p t) + eps) / (sum p + sum t + eps)` with `eps = 1`.
pub fn dice_loss(p: &MaskPair) -> f64 {
    let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
    for (&pr, &t) in p.predicted.iter().zip(&p.truth) {
        let t = f64::from(t);
        inter += pr * t;
        sp += pr;
        st += t;
    }
    1.0 - (2.0 * inter + DICE_EPS) / (sp + st + DICE_EPS)
}

/// Mean of `-alpha_t (1 - p_t)^gamma ln(p_t)` with probabilities clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn focal_loss(p: &MaskPair, gamma: f64, alpha: f64) -> Result<f64> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::param(format!("gamma must be >= 0, got {gamma}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::param(format!(
            "alpha must be in (0, 1), got {alpha}"
        )));
    }
    let sum: f64 = p
        .predicted
        .iter()
        .zip(&p.truth)
        .map(|(&pr, &t)| {
            let pr = pr.clamp(FOCAL_CLAMP, 1.0 - FOCAL_CLAMP);
            let (pt, at) = if t == 1 {
                (pr, alpha)
            } else {
                (1.0 - pr, 1.0 - alpha)
            };
            -at * (1.0 - pt).powf(gamma) * pt.ln()
        })
        .sum();
    Ok(sum / p.predicted.len() as f64)
}

pub fn total_loss(contrastive: f64, dice: f64, focal: f64, w: &LossWeights) -> f64 {
    w.contrastive * contrastive + w.dice * dice + w.focal * focal
}
