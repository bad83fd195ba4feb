//! Hand-crafted patch descriptors used when no learned feature maps are
//! available.
//!
//! Each cell is described by three blocks: mean colour, an 8-bin
//! magnitude-weighted gradient orientation histogram, and intensity spread.
//! Blocks are scaled to comparable magnitudes and depend only on the cell's
//! own pixels, so a local edit changes only the cells it touches.

use super::DenseFeatureMap;
use crate::error::{Error, Result};
use crate::imagecore::{to_grayscale, ImageBuffer};

pub const BUILTIN_DIM: usize = 12;
pub const ORIENTATION_BINS: usize = 8;

/// Damping for the histogram block, in grey levels of mean gradient
/// magnitude; cells with weaker gradients shrink toward zero rather than
/// being normalised up to unit length.
const HIST_DAMPING: f64 = 4.0;

/// Cell boundaries along one axis: `cells` spans tiling `len` pixels with
/// the remainder spread evenly.
fn cell_span(i: usize, cells: usize, len: usize) -> (usize, usize) {
    (i * len / cells, (i + 1) * len / cells)
}

pub fn extract_features_builtin(img: &ImageBuffer, patch_size: usize) -> Result<DenseFeatureMap> {
    if patch_size == 0 {
        return Err(Error::param("patch size must be positive"));
    }
    let (w, h) = (img.width(), img.height());
    if w < patch_size || h < patch_size {
        return Err(Error::param(format!(
            "image {w}x{h} is smaller than one {patch_size}px patch"
        )));
    }
    let (grid_w, grid_h) = (w / patch_size, h / patch_size);
    let rgb = img.to_rgb();
    let gray = to_grayscale(img);
    let luma = |x: usize, y: usize| f64::from(gray.luma_at(x, y));

    let mut values = Vec::with_capacity(grid_h * grid_w * BUILTIN_DIM);
    for gy in 0..grid_h {
        let (y0, y1) = cell_span(gy, grid_h, h);
        for gx in 0..grid_w {
            let (x0, x1) = cell_span(gx, grid_w, w);
            let n = ((x1 - x0) * (y1 - y0)) as f64;

            let mut color = [0f64; 3];
            let (mut sum, mut sum_sq) = (0f64, 0f64);
            let mut hist = [0f64; ORIENTATION_BINS];
            for y in y0..y1 {
                for x in x0..x1 {
                    for (c, &v) in color.iter_mut().zip(rgb.pixel(x, y)) {
                        *c += f64::from(v);
                    }
                    let l = luma(x, y);
                    sum += l;
                    sum_sq += l * l;

                    // Central differences, one-sided at the image border.
                    let gx_ = luma((x + 1).min(w - 1), y) - luma(x.saturating_sub(1), y);
                    let gy_ = luma(x, (y + 1).min(h - 1)) - luma(x, y.saturating_sub(1));
                    let mag = gx_.hypot(gy_);
                    if mag > 0.0 {
                        let theta = gy_.atan2(gx_).rem_euclid(std::f64::consts::TAU);
                        let bin = ((theta / std::f64::consts::TAU * ORIENTATION_BINS as f64)
                            as usize)
                            .min(ORIENTATION_BINS - 1);
                        hist[bin] += mag;
                    }
                }
            }

            for c in color {
                values.push(((c / n - 127.5) / 127.5) as f32);
            }
            let hist: Vec<f64> = hist.iter().map(|v| v / n).collect();
            let norm = hist.iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = 1.0 / (norm * norm + HIST_DAMPING * HIST_DAMPING).sqrt();
            values.extend(hist.iter().map(|v| (v * scale) as f32));
            let mean = sum / n;
            let var = (sum_sq / n - mean * mean).max(0.0);
            values.push((var.sqrt() / 64.0) as f32);
        }
    }
    DenseFeatureMap::new(grid_h, grid_w, BUILTIN_DIM, patch_size, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::Channels;

    fn scene(w: usize, h: usize) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, Channels::Rgb, |x, y| {
            [
                ((x * 5 + y) % 256) as u8,
                ((y * 3) % 256) as u8,
                ((x ^ y) % 256) as u8,
            ]
        })
        .unwrap()
    }

    #[test]
    fn deterministic() {
        let img = scene(64, 48);
        assert_eq!(
            extract_features_builtin(&img, 16).unwrap(),
            extract_features_builtin(&img, 16).unwrap()
        );
    }

    #[test]
    fn grid_arithmetic() {
        let m = extract_features_builtin(&scene(70, 33), 16).unwrap();
        assert_eq!(
            (m.grid_h(), m.grid_w(), m.dim(), m.patch_size()),
            (2, 4, 12, 16)
        );
        assert!(extract_features_builtin(&scene(10, 40), 16).is_err());
    }

    #[test]
    fn flat_image_has_empty_gradient_block() {
        let m =
            extract_features_builtin(&ImageBuffer::filled(32, 32, Channels::Rgb, 90).unwrap(), 8)
                .unwrap();
        for cell in m.values().chunks_exact(BUILTIN_DIM) {
            assert!(cell[3..3 + ORIENTATION_BINS].iter().all(|&v| v == 0.0));
            assert_eq!(cell[11], 0.0);
        }
    }

    #[test]
    fn edits_stay_local() {
        let img = scene(64, 64);
        let mut edited = img.clone();
        // Noise confined to cell (1, 2) of a 16px grid, away from its border
        // so gradients of neighbouring cells are untouched.
        let mut state = 12345u32;
        for y in 17..31 {
            for x in 33..47 {
                for v in edited.pixel_mut(x, y) {
                    state = state.wrapping_mul(1_103_515_245).wrapping_add(12345);
                    *v = (state >> 16) as u8;
                }
            }
        }
        let (a, b) = (
            extract_features_builtin(&img, 16).unwrap(),
            extract_features_builtin(&edited, 16).unwrap(),
        );
        for gy in 0..4 {
            for gx in 0..4 {
                let same = a.cell(gy, gx) == b.cell(gy, gx);
                assert_eq!(same, (gy, gx) != (1, 2), "cell ({gy}, {gx})");
            }
        }
    }
}
