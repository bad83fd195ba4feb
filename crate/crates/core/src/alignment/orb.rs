//! FAST-9 corners ranked by Harris response, oriented by intensity centroid
//! and described with a rotation-steered 256-pair binary test pattern.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{Channels, ImageBuffer};

pub const DEFAULT_MAX_KEYPOINTS: usize = 1000;
pub const DEFAULT_FAST_THRESHOLD: u8 = 20;

/// Smallest width or height accepted by [`detect_keypoints`].
pub const MIN_DETECT_DIM: usize = 32;

/// Radius of the disc used for the intensity centroid.
const ORIENTATION_RADIUS: i32 = 15;
/// Keypoints closer than this to the border are discarded so every steered
/// test point stays inside the image.
const BORDER: usize = 19;
const HARRIS_K: f32 = 0.04;
const HARRIS_HALF_WINDOW: i32 = 3;

/// Offsets of the 16-pixel Bresenham circle of radius 3, clockwise from 12
/// o'clock.
const CIRCLE: [(i32, i32); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

/// Binary test pairs `[x1, y1, x2, y2]` relative to the keypoint.
///
/// Drawn once from an isotropic Gaussian (sigma 6.2 px, rounded and clipped to
/// +/-13) with seed 0x5EED; frozen here so descriptors are bit-reproducible.
#[rustfmt::skip]
const PATTERN: [[i8; 4]; 256] = [
    [2, 6, 10, 0], [-11, 6, 7, -5], [-4, -9, -2, -4], [3, -5, 3, 4],
    [-2, 3, 8, -4], [-2, -3, 10, -3], [-2, -6, -13, -11], [1, -1, 13, -4],
    [9, 7, -7, 6], [8, 0, 12, -10], [9, 7, 1, 0], [-3, 3, -1, -6],
    [-8, 0, 3, 5], [-4, -1, 13, 3], [10, 9, -3, -3], [7, -9, -9, -4],
    [2, 13, -5, 3], [5, -5, -9, 3], [-1, 4, -7, 4], [1, 0, -5, 7],
    [3, 2, -5, 5], [10, -3, -3, 5], [-3, 10, 0, 7], [12, -2, -2, -3],
    [-1, 7, -3, -6], [-1, 0, 1, 12], [8, 3, -12, 1], [9, -4, 4, -1],
    [13, -3, -10, 0], [6, -1, 8, -4], [2, -6, 0, 8], [0, -7, 1, -4],
    [-4, 11, -3, -8], [3, 7, 13, 3], [7, 2, -3, -10], [11, -2, 0, 8],
    [2, -5, 2, 5], [2, 12, -8, 1], [6, 1, -4, -13], [13, -7, -3, -6],
    [-11, 11, -2, -1], [-1, 0, 0, 0], [7, 3, -2, 0], [2, -5, -8, -1],
    [-1, 1, -6, 6], [2, 4, -5, 0], [-3, -1, 3, 4], [-3, 8, 8, 2],
    [-3, -2, -4, -12], [-2, 3, 9, -5], [-9, -8, -3, 13], [-1, 5, 10, 3],
    [3, 3, 5, 6], [0, -7, -4, 0], [-1, 7, 2, -8], [13, -13, 5, 10],
    [3, 0, 4, 0], [-13, -2, -10, -11], [-13, 3, -10, -5], [-7, -1, 0, 7],
    [1, 7, -10, -13], [-3, 3, 1, 7], [-8, 2, 4, -7], [0, 5, 1, 3],
    [4, 5, 2, 4], [1, 1, 12, 3], [-7, 0, 2, 1], [-13, -1, -5, -10],
    [-13, 12, 2, 3], [-2, 0, -9, -10], [3, -4, -5, 7], [2, -1, 0, -2],
    [5, -3, 4, 8], [4, -9, 7, 4], [-3, 7, 3, 3], [-1, 10, 2, -9],
    [-2, 2, 0, -3], [8, -3, 6, 0], [5, 0, 5, -6], [2, -6, -6, -2],
    [-7, -6, -2, 7], [6, -4, -10, 2], [3, 1, 13, -13], [6, -2, -2, -8],
    [10, -8, -3, 4], [13, 3, 7, 0], [-3, 1, 6, 2], [4, -5, -5, 0],
    [-3, 6, 0, 5], [-3, 2, -1, 0], [5, -4, -1, 5], [5, 7, 4, -2],
    [1, -6, -3, -12], [13, -1, 2, -11], [-1, -10, 0, 6], [7, 3, -2, 3],
    [3, -7, 8, -3], [3, -1, -9, -1], [3, 2, -10, -5], [-10, 12, 3, 2],
    [0, 3, 0, -2], [-4, 4, -5, -2], [-1, -3, 3, -5], [-3, 1, 1, -9],
    [1, -1, 4, 2], [1, 0, -1, 6], [-5, 2, -10, 4], [6, 8, 6, -3],
    [-8, -7, -2, -2], [3, 1, -2, -2], [-1, 8, -6, 4], [2, -1, 9, -5],
    [8, 6, 12, -4], [-7, 12, 6, -2], [8, 4, -1, -1], [1, 5, 6, -2],
    [-1, 9, 8, 3], [-10, 6, -8, 1], [2, -8, -13, 5], [-4, -8, -8, 1],
    [0, -5, 0, 5], [5, 9, 0, 13], [6, -8, 0, 1], [-9, 0, -7, 2],
    [1, 10, 2, 2], [2, -5, -12, 2], [5, 3, 0, 6], [4, -8, 7, -4],
    [-8, 0, -3, 2], [-1, 1, -3, -3], [3, -3, 8, -1], [3, 8, 4, 7],
    [0, -6, -5, 0], [-2, 10, -3, -5], [6, -13, -4, -9], [13, 1, 0, 2],
    [-5, 7, 3, 6], [0, -9, 7, 1], [3, -3, -3, 6], [6, -6, -4, 5],
    [6, 6, 8, -1], [-4, -6, -11, 13], [2, 1, -1, -4], [-10, 4, -5, 7],
    [-5, -2, 2, -3], [-10, -6, 4, 0], [3, -2, 0, -2], [-3, 1, -1, -10],
    [0, -1, -5, 2], [1, 4, 5, -10], [-1, -11, -3, 3], [-10, 3, -2, -3],
    [1, -9, -10, 8], [3, 2, -7, 11], [1, 9, -9, -2], [3, -13, 10, -2],
    [4, -4, 5, 9], [-3, -4, 3, -7], [-4, 3, 9, 0], [9, 7, 2, 6],
    [0, 13, -11, -2], [-13, -4, -3, 2], [-12, -4, 7, -10], [2, -6, 10, 1],
    [5, 8, -6, -7], [4, -4, -7, 2], [-10, 4, 2, 5], [-5, 10, 1, 0],
    [-11, -1, -11, 0], [-3, 2, 1, -5], [-9, -4, -1, -2], [5, 2, -4, 7],
    [-4, 12, 4, -3], [12, 4, 7, 6], [-5, 5, 1, 7], [-10, -8, -9, 3],
    [7, 11, 0, -10], [0, 4, 3, -1], [-12, 4, 7, 2], [0, 7, -7, 13],
    [-11, 9, 4, -3], [-5, 3, 12, -9], [3, 2, 0, -3], [3, -9, -4, 6],
    [10, 2, -7, 1], [-3, -13, -3, -5], [-3, 5, 13, 5], [-5, 2, 1, -9],
    [7, 4, 3, -4], [0, -8, -5, 4], [-4, 10, 11, -9], [-12, -7, -5, -11],
    [4, 4, 1, 4], [-13, 8, 5, 2], [-5, 10, -4, 2], [9, 7, 5, 0],
    [-4, -1, -3, 0], [1, 2, -6, -3], [-3, -7, -6, -4], [-5, -4, 8, -3],
    [1, 0, -4, 13], [1, 13, 7, 7], [9, -10, -1, -1], [2, -4, -3, -10],
    [3, 3, 6, -4], [-11, -6, -4, 4], [-2, 6, 5, -3], [5, -8, -2, -9],
    [0, -2, -9, 5], [-8, 0, -3, -2], [-1, 2, -4, -7], [-9, -1, 1, -1],
    [3, -2, 6, 2], [-3, -3, -8, -2], [-5, 5, 0, 9], [-2, 0, 7, 7],
    [-2, 9, -9, -2], [2, 1, 0, -11], [-8, 4, -7, -4], [12, 12, -3, -12],
    [5, -3, -4, 3], [2, 13, 0, -1], [0, 13, 8, -3], [-9, 5, 0, -3],
    [-13, 1, 5, -2], [3, -3, -3, 11], [6, 0, -2, 4], [-1, -8, -1, 7],
    [-5, -2, 4, 2], [-13, -7, -9, 0], [9, 11, -12, 1], [1, -1, -4, 3],
    [0, 11, 1, 9], [3, 1, 4, -7], [2, 2, -4, 6], [1, -9, 7, -1],
    [-5, 6, 13, -2], [1, -7, 4, 2], [-6, -1, -8, 0], [13, -5, -2, -2],
    [-1, -6, -7, 4], [0, 2, -1, -6], [5, -6, 6, -11], [-1, 0, -3, -6],
    [6, 2, 1, 5], [4, -2, -6, -1], [-4, -10, -2, 3], [4, -3, 4, 5],
    [-1, -8, 1, 4], [0, 2, 6, -7], [1, -1, 2, -8], [-2, -13, 0, 1],
    [-3, -7, 7, 0], [-1, -9, 0, -4], [-12, -8, -3, 4], [-5, -11, -5, -12],
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    /// Harris corner response.
    pub response: f32,
    /// Orientation in degrees, `[0, 360)`.
    pub angle: f32,
}

/// 256-bit binary descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BinaryDescriptor(pub [u8; 32]);

impl BinaryDescriptor {
    pub fn hamming(&self, other: &BinaryDescriptor) -> u32 {
        self.0
            .chunks_exact(8)
            .zip(other.0.chunks_exact(8))
            .map(|(a, b)| {
                let a = u64::from_le_bytes(a.try_into().unwrap());
                let b = u64::from_le_bytes(b.try_into().unwrap());
                (a ^ b).count_ones()
            })
            .sum()
    }

    pub fn bit(&self, i: usize) -> bool {
        self.0[i / 8] >> (i % 8) & 1 == 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub max_keypoints: usize,
    pub fast_threshold: u8,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            max_keypoints: DEFAULT_MAX_KEYPOINTS,
            fast_threshold: DEFAULT_FAST_THRESHOLD,
        }
    }
}

/// Detects up to `max_count` oriented keypoints with descriptors, strongest
/// Harris response first.
pub fn detect_keypoints(
    gray: &ImageBuffer,
    max_count: usize,
) -> Result<Vec<(Keypoint, BinaryDescriptor)>> {
    detect_keypoints_with(
        gray,
        &DetectorConfig {
            max_keypoints: max_count,
            ..DetectorConfig::default()
        },
    )
}

pub fn detect_keypoints_with(
    gray: &ImageBuffer,
    cfg: &DetectorConfig,
) -> Result<Vec<(Keypoint, BinaryDescriptor)>> {
    if gray.channels() != Channels::Gray {
        return Err(Error::Detection("expected a single-channel image".into()));
    }
    let (w, h) = (gray.width(), gray.height());
    if w.min(h) < MIN_DETECT_DIM {
        return Err(Error::Detection(format!(
            "image {w}x{h} is smaller than {MIN_DETECT_DIM} px"
        )));
    }
    if cfg.max_keypoints == 0 || w <= 2 * BORDER || h <= 2 * BORDER {
        return Ok(Vec::new());
    }

    let corners = fast_corners(gray, cfg.fast_threshold);
    let mut ranked: Vec<(usize, usize, f32)> = corners
        .into_iter()
        .map(|(x, y)| (x, y, harris_response(gray, x, y)))
        .collect();
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.1.cmp(&b.1)).then(a.0.cmp(&b.0)));
    ranked.truncate(cfg.max_keypoints);

    let smoothed = gaussian_blur(gray);
    Ok(ranked
        .into_iter()
        .map(|(x, y, response)| {
            let angle = intensity_centroid_angle(gray, x, y);
            let kp = Keypoint {
                x: x as f32,
                y: y as f32,
                response,
                angle,
            };
            (kp, steered_descriptor(&smoothed, x, y, angle))
        })
        .collect())
}

/// FAST-9 segment test with 3x3 non-maximum suppression on the SAD score.
fn fast_corners(gray: &ImageBuffer, threshold: u8) -> Vec<(usize, usize)> {
    let (w, h) = (gray.width(), gray.height());
    let data = gray.data();
    let offsets: Vec<isize> = CIRCLE
        .iter()
        .map(|&(dx, dy)| dy as isize * w as isize + dx as isize)
        .collect();
    let t = i16::from(threshold);

    // Scores are computed for a one-pixel ring beyond the keypoint border so
    // suppression at the border sees real neighbours.
    let lo = BORDER - 1;
    let mut score = vec![0u32; w * h];
    for y in lo..h - lo {
        for x in lo..w - lo {
            let idx = y * w + x;
            let centre = i16::from(data[idx]);
            let mut ring = [0i16; 16];
            for (r, &off) in ring.iter_mut().zip(&offsets) {
                *r = i16::from(data[(idx as isize + off) as usize]);
            }
            score[idx] = segment_score(centre, &ring, t);
        }
    }

    let mut out = Vec::new();
    for y in BORDER..h - BORDER {
        for x in BORDER..w - BORDER {
            let s = score[y * w + x];
            if s == 0 {
                continue;
            }
            let mut keep = true;
            'nbr: for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let n = score[(y as i32 + dy) as usize * w + (x as i32 + dx) as usize];
                    // Plateaus keep their first pixel in raster order.
                    let earlier = dy < 0 || (dy == 0 && dx < 0);
                    if n > s || (n == s && earlier) {
                        keep = false;
                        break 'nbr;
                    }
                }
            }
            if keep {
                out.push((x, y));
            }
        }
    }
    out
}

/// Nonzero iff at least 9 contiguous ring pixels are all brighter than
/// `centre + t` or all darker than `centre - t`; the value is the summed
/// excess over the threshold of the winning side.
fn segment_score(centre: i16, ring: &[i16; 16], t: i16) -> u32 {
    // Quick rejection on the four compass points: a 9-arc covers at least two.
    let compass = [ring[0], ring[4], ring[8], ring[12]];
    let bright = compass.iter().filter(|&&v| v > centre + t).count();
    let dark = compass.iter().filter(|&&v| v < centre - t).count();
    if bright < 2 && dark < 2 {
        return 0;
    }

    let has_arc = |pred: &dyn Fn(i16) -> bool| {
        let mut run = 0;
        for i in 0..32 {
            if pred(ring[i % 16]) {
                run += 1;
                if run >= 9 {
                    return true;
                }
            } else {
                run = 0;
            }
        }
        false
    };
    let is_bright = |v: i16| v > centre + t;
    let is_dark = |v: i16| v < centre - t;
    let bright_arc = has_arc(&is_bright);
    let dark_arc = has_arc(&is_dark);
    if !bright_arc && !dark_arc {
        return 0;
    }
    let sum_bright: u32 = ring
        .iter()
        .filter(|&&v| is_bright(v))
        .map(|&v| (v - centre - t) as u32)
        .sum();
    let sum_dark: u32 = ring
        .iter()
        .filter(|&&v| is_dark(v))
        .map(|&v| (centre - t - v) as u32)
        .sum();
    match (bright_arc, dark_arc) {
        (true, false) => sum_bright.max(1),
        (false, true) => sum_dark.max(1),
        _ => sum_bright.max(sum_dark).max(1),
    }
}

/// Harris measure from Sobel gradients summed over a 7x7 window.
fn harris_response(gray: &ImageBuffer, x: usize, y: usize) -> f32 {
    let at = |x: i32, y: i32| f32::from(gray.luma_at(x as usize, y as usize));
    let (mut sxx, mut syy, mut sxy) = (0f32, 0f32, 0f32);
    for v in -HARRIS_HALF_WINDOW..=HARRIS_HALF_WINDOW {
        for u in -HARRIS_HALF_WINDOW..=HARRIS_HALF_WINDOW {
            let (px, py) = (x as i32 + u, y as i32 + v);
            let gx = (at(px + 1, py - 1) + 2.0 * at(px + 1, py) + at(px + 1, py + 1))
                - (at(px - 1, py - 1) + 2.0 * at(px - 1, py) + at(px - 1, py + 1));
            let gy = (at(px - 1, py + 1) + 2.0 * at(px, py + 1) + at(px + 1, py + 1))
                - (at(px - 1, py - 1) + 2.0 * at(px, py - 1) + at(px + 1, py - 1));
            sxx += gx * gx;
            syy += gy * gy;
            sxy += gx * gy;
        }
    }
    // Normalise so responses are comparable with the usual 8-bit scale.
    let norm = 1.0 / (4.0 * 49.0 * 255.0);
    let (a, b, c) = (sxx * norm * norm, syy * norm * norm, sxy * norm * norm);
    a * b - c * c - HARRIS_K * (a + b) * (a + b)
}

fn intensity_centroid_angle(gray: &ImageBuffer, x: usize, y: usize) -> f32 {
    let r2 = ORIENTATION_RADIUS * ORIENTATION_RADIUS;
    let (mut m10, mut m01) = (0i64, 0i64);
    for dy in -ORIENTATION_RADIUS..=ORIENTATION_RADIUS {
        for dx in -ORIENTATION_RADIUS..=ORIENTATION_RADIUS {
            if dx * dx + dy * dy > r2 {
                continue;
            }
            let v = i64::from(gray.luma_at((x as i32 + dx) as usize, (y as i32 + dy) as usize));
            m10 += i64::from(dx) * v;
            m01 += i64::from(dy) * v;
        }
    }
    let deg = (m01 as f64).atan2(m10 as f64).to_degrees();
    let deg = if deg < 0.0 { deg + 360.0 } else { deg };
    if deg >= 360.0 {
        0.0
    } else {
        deg as f32
    }
}

fn steered_descriptor(smoothed: &ImageBuffer, x: usize, y: usize, angle: f32) -> BinaryDescriptor {
    let (sin, cos) = f64::from(angle).to_radians().sin_cos();
    let sample = |px: i8, py: i8| {
        let (px, py) = (f64::from(px), f64::from(py));
        let rx = (px * cos - py * sin).round() as i32;
        let ry = (px * sin + py * cos).round() as i32;
        smoothed.luma_at((x as i32 + rx) as usize, (y as i32 + ry) as usize)
    };
    let mut bits = [0u8; 32];
    for (i, p) in PATTERN.iter().enumerate() {
        if sample(p[0], p[1]) < sample(p[2], p[3]) {
            bits[i / 8] |= 1 << (i % 8);
        }
    }
    BinaryDescriptor(bits)
}

/// 7-tap Gaussian (sigma 2), separable, replicated borders.
fn gaussian_blur(gray: &ImageBuffer) -> ImageBuffer {
    const SIGMA: f32 = 2.0;
    let mut kernel = [0f32; 7];
    for (i, k) in kernel.iter_mut().enumerate() {
        let d = i as f32 - 3.0;
        *k = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (w, h) = (gray.width(), gray.height());
    let src = gray.data();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * f32::from(src[y * w + clamp(x as isize + i as isize - 3, w)]))
                .sum();
        }
    }
    let mut out = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            let v: f32 = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * tmp[clamp(y as isize + i as isize - 3, h) * w + x])
                .sum();
            out[y * w + x] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    ImageBuffer::new(w, h, Channels::Gray, out).expect("same dimensions as input")
}
