//! Procedural test data: textured scenes and edited pairs with known
//! geometry and known edit regions.
//!
//! Used by the test suites and by `forgemask synth` to produce small
//! reproducible corpora.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment::{warp_affine, AffineTransform};
use crate::error::Result;
use crate::imagecore::{jpeg_reencode, Channels, ImageBuffer, Rect};
use crate::semanticmask::{resize_mask, EditMask};

/// A scene of overlapping flat-shaded rectangles and discs over a smooth
/// colour gradient, with light pixel noise. Rich in corners at every scale
/// the detector cares about.
pub fn textured_scene(width: usize, height: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [[f64; 3]; 2] = [
        std::array::from_fn(|_| rng.random_range(40.0..215.0)),
        std::array::from_fn(|_| rng.random_range(40.0..215.0)),
    ];
    let mut data = vec![0u8; width * height * 3];
    for y in 0..height {
        for x in 0..width {
            let t = (x + y) as f64 / (width + height) as f64;
            for c in 0..3 {
                data[(y * width + x) * 3 + c] = (base[0][c] * (1.0 - t) + base[1][c] * t) as u8;
            }
        }
    }

    let area = (width * height) as f64;
    let shapes = ((area / 1200.0) as usize).max(12);
    for _ in 0..shapes {
        let color: [u8; 3] = std::array::from_fn(|_| rng.random_range(0..=255));
        let size_cap = (width.min(height) / 6).max(6);
        let sw = rng.random_range(4..=size_cap);
        let sh = rng.random_range(4..=size_cap);
        let cx = rng.random_range(0..width) as f64;
        let cy = rng.random_range(0..height) as f64;
        let disc = rng.random_bool(0.35);
        let x0 = (cx - sw as f64 / 2.0).max(0.0) as usize;
        let y0 = (cy - sh as f64 / 2.0).max(0.0) as usize;
        let x1 = ((cx + sw as f64 / 2.0) as usize).min(width);
        let y1 = ((cy + sh as f64 / 2.0) as usize).min(height);
        for y in y0..y1 {
            for x in x0..x1 {
                if disc {
                    let dx = (x as f64 - cx) / (sw as f64 / 2.0);
                    let dy = (y as f64 - cy) / (sh as f64 / 2.0);
                    if dx * dx + dy * dy > 1.0 {
                        continue;
                    }
                }
                data[(y * width + x) * 3..][..3].copy_from_slice(&color);
            }
        }
    }

    for v in data.iter_mut() {
        let noise: i16 = rng.random_range(-3..=3);
        *v = (i16::from(*v) + noise).clamp(0, 255) as u8;
    }
    ImageBuffer::new(width, height, Channels::Rgb, data).expect("dimensions match")
}

/// Random near-identity affine about the image centre: isotropic scale in
/// `[0.9, 1.1]`, rotation within +/-3 degrees, shear within +/-0.02 and
/// translation up to `max_shift` pixels per axis.
pub fn random_small_affine(
    rng: &mut impl Rng,
    width: usize,
    height: usize,
    max_shift: f64,
) -> AffineTransform {
    let scale = rng.random_range(0.9..=1.1);
    let angle = rng.random_range(-3.0f64..=3.0).to_radians();
    let shear = rng.random_range(-0.02..=0.02);
    let (tx, ty) = (
        rng.random_range(-max_shift..=max_shift),
        rng.random_range(-max_shift..=max_shift),
    );
    let (s, c) = angle.sin_cos();
    let (l1, l2, l4, l5) = (
        scale * c,
        scale * (-s + shear * c),
        scale * s,
        scale * (c + shear * s),
    );
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    AffineTransform::new(
        l1,
        l2,
        cx - (l1 * cx + l2 * cy) + tx,
        l4,
        l5,
        cy - (l4 * cx + l5 * cy) + ty,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EditSpec {
    /// Range of the edited area as a fraction of the edited image.
    pub area: (f64, f64),
    pub max_shift: f64,
    /// Re-save the edited image as JPEG at this quality.
    pub jpeg_quality: Option<u8>,
    /// Apply a random affine between original and edited.
    pub geometric: bool,
}

impl Default for EditSpec {
    fn default() -> Self {
        Self {
            area: (0.05, 0.30),
            max_shift: 20.0,
            jpeg_quality: Some(90),
            geometric: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub original: ImageBuffer,
    pub edited: ImageBuffer,
    /// Maps original pixel coordinates to edited ones.
    pub transform: AffineTransform,
    /// Edited region, in edited-image coordinates.
    pub patch: Rect,
}

impl SyntheticPair {
    /// Ground-truth mask for the part of the edited image inside `crop`,
    /// resampled to `out_w x out_h` the same way predicted masks are.
    pub fn truth_mask(&self, crop: Rect, out_w: usize, out_h: usize) -> Result<EditMask> {
        let p = self.patch;
        let full = EditMask::from_fn(crop.w, crop.h, |x, y| {
            let (ex, ey) = (crop.x + x, crop.y + y);
            ex >= p.x && ex < p.x + p.w && ey >= p.y && ey < p.y + p.h
        })?;
        resize_mask(&full, out_w, out_h)
    }
}

/// A scene and the same scene seen through a random small affine, with no
/// content change. Returns `(original, warped, original_to_warped)`.
pub fn synthetic_warp_pair(
    width: usize,
    height: usize,
    seed: u64,
    max_shift: f64,
) -> Result<(ImageBuffer, ImageBuffer, AffineTransform)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    let transform = random_small_affine(&mut rng, width, height, max_shift);
    let (original, warped) = render_pair(width, height, seed, max_shift, &transform)?;
    Ok((original, warped, transform))
}

// Renders a larger canvas so the warped view has no empty borders.
fn render_pair(
    width: usize,
    height: usize,
    seed: u64,
    max_shift: f64,
    transform: &AffineTransform,
) -> Result<(ImageBuffer, ImageBuffer)> {
    let margin = (0.1 * width.max(height) as f64 + max_shift).ceil() as usize + 8;
    let canvas = textured_scene(width + 2 * margin, height + 2 * margin, seed);
    let m = margin as f64;
    let original = crate::imagecore::crop(&canvas, Rect::new(margin, margin, width, height))?;
    let canvas_to_warped = transform.compose(&AffineTransform::translation(-m, -m));
    Ok((
        original,
        warp_affine(&canvas, &canvas_to_warped, width, height)?,
    ))
}

/// Builds an original scene and an edited counterpart: the scene seen
/// through a random small affine, with one rectangle replaced by unrelated
/// content, optionally JPEG re-saved.
pub fn synthetic_edit_pair(
    width: usize,
    height: usize,
    seed: u64,
    spec: &EditSpec,
) -> Result<SyntheticPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    let transform = if spec.geometric {
        random_small_affine(&mut rng, width, height, spec.max_shift)
    } else {
        AffineTransform::IDENTITY
    };
    let (original, mut edited) = render_pair(width, height, seed, spec.max_shift, &transform)?;

    let frac = rng.random_range(spec.area.0..=spec.area.1);
    let aspect = rng.random_range(0.6f64..=1.6);
    let target = frac * (width * height) as f64;
    let pw = ((target * aspect).sqrt().round() as usize).clamp(8, width - 2);
    let ph = ((target / pw as f64).round() as usize).clamp(8, height - 2);
    let px = rng.random_range(0..=width - pw);
    let py = rng.random_range(0..=height - ph);
    let patch = Rect::new(px, py, pw, ph);

    let filler = textured_scene(pw, ph, seed.wrapping_mul(31).wrapping_add(17));
    let tint: [i16; 3] = std::array::from_fn(|_| rng.random_range(-60..=60));
    for y in 0..ph {
        for x in 0..pw {
            let src = filler.pixel(x, y);
            let noise: i16 = rng.random_range(-40..=40);
            let dst = edited.pixel_mut(px + x, py + y);
            for c in 0..3 {
                dst[c] = (i16::from(src[c]) + tint[c] + noise).clamp(0, 255) as u8;
            }
        }
    }
    if let Some(q) = spec.jpeg_quality {
        edited = jpeg_reencode(&edited, q)?;
    }

    Ok(SyntheticPair {
        original,
        edited,
        transform,
        patch,
    })
}
