use super::affine::AffineTransform;
use crate::error::{Error, Result};
use crate::imagecore::{ImageBuffer, Rect};

/// Slack on the source bounds so that samples landing on the last row or
/// column through rounding noise are not blacked out.
const BOUNDS_EPS: f64 = 1e-9;

/// Whether a source sample position lies on the `w x h` pixel grid.
#[inline]
pub fn source_inside(sx: f64, sy: f64, w: usize, h: usize) -> bool {
    sx >= -BOUNDS_EPS
        && sy >= -BOUNDS_EPS
        && sx <= (w - 1) as f64 + BOUNDS_EPS
        && sy <= (h - 1) as f64 + BOUNDS_EPS
}

/// Warps `img` into an `out_w x out_h` frame: output pixel `p` is sampled
/// bilinearly at `t^-1(p)`, and samples outside the source are black.
pub fn warp_affine(
    img: &ImageBuffer,
    t: &AffineTransform,
    out_w: usize,
    out_h: usize,
) -> Result<ImageBuffer> {
    let inv = t
        .inverse()
        .ok_or_else(|| Error::param(format!("transform {t:?} is not invertible")))?;
    let (w, h) = (img.width(), img.height());
    let c = img.channels().count();
    let src = img.data();
    let mut out = vec![0u8; out_w * out_h * c];
    let mut acc = [0f64; 3];

    for y in 0..out_h {
        for x in 0..out_w {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            if !source_inside(sx, sy, w, h) {
                continue;
            }
            let sx = sx.clamp(0.0, (w - 1) as f64);
            let sy = sy.clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            let weights = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x1, y0, fx * (1.0 - fy)),
                (x0, y1, (1.0 - fx) * fy),
                (x1, y1, fx * fy),
            ];
            acc[..c].fill(0.0);
            for (px, py, wgt) in weights {
                if wgt == 0.0 {
                    continue;
                }
                let base = (py * w + px) * c;
                for (a, &v) in acc[..c].iter_mut().zip(&src[base..base + c]) {
                    *a += wgt * f64::from(v);
                }
            }
            let base = (y * out_w + x) * c;
            for (o, a) in out[base..base + c].iter_mut().zip(&acc[..c]) {
                *o = a.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    ImageBuffer::new(out_w, out_h, img.channels(), out)
}

/// Inclusive range of columns in destination row `y` whose samples fall
/// inside the `src_w x src_h` source, or `None` if the row is empty.
fn valid_columns(
    inv: &AffineTransform,
    y: usize,
    src_w: usize,
    src_h: usize,
    dst_w: usize,
) -> Option<(usize, usize)> {
    let [b1, b2, b3, b4, b5, b6] = inv.0;
    let yf = y as f64;
    let (mut lo, mut hi) = (0.0f64, (dst_w - 1) as f64);
    // Each source coordinate is linear in x: c * x + d must lie in [0, limit].
    for (c, d, limit) in [
        (b1, b2 * yf + b3, (src_w - 1) as f64),
        (b4, b5 * yf + b6, (src_h - 1) as f64),
    ] {
        if c.abs() < 1e-15 {
            if d < -BOUNDS_EPS || d > limit + BOUNDS_EPS {
                return None;
            }
        } else {
            let (a, b) = ((-d) / c, (limit - d) / c);
            lo = lo.max(a.min(b));
            hi = hi.min(a.max(b));
        }
    }
    if lo > hi + 1.0 {
        return None;
    }
    let inside = |x: i64| {
        x >= 0 && (x as usize) < dst_w && {
            let (sx, sy) = inv.apply(x as f64, yf);
            source_inside(sx, sy, src_w, src_h)
        }
    };
    // The analytic bounds can be off by one through rounding; settle them
    // against the exact predicate used by the warp.
    let mut l = lo.ceil().max(0.0) as i64;
    let mut r = hi.floor().min((dst_w - 1) as f64) as i64;
    while l <= r && !inside(l) {
        l += 1;
    }
    while r >= l && !inside(r) {
        r -= 1;
    }
    if l > r {
        // Fall back to a scan near the analytic interval.
        let centre = ((lo + hi) / 2.0).round() as i64;
        let candidates = (centre - 2..=centre + 2).filter(|&x| inside(x));
        let found: Vec<i64> = candidates.collect();
        let (&first, &last) = (found.first()?, found.last()?);
        l = first;
        r = last;
    }
    while inside(l - 1) {
        l -= 1;
    }
    while inside(r + 1) {
        r += 1;
    }
    Some((l as usize, r as usize))
}

/// Largest axis-aligned rectangle of destination pixels whose warped samples
/// all come from inside the source image.
///
/// The valid region is the destination frame intersected with the warped
/// source footprint; being convex, each row holds one interval of valid
/// columns, and every pair of start/end rows is scanned. Ties prefer the
/// larger area, then the smaller x, then the smaller y.
pub fn compute_common_crop(
    t: &AffineTransform,
    src_w: usize,
    src_h: usize,
    dst_w: usize,
    dst_h: usize,
) -> Result<Rect> {
    if src_w == 0 || src_h == 0 || dst_w == 0 || dst_h == 0 {
        return Err(Error::param("image dimensions must be positive"));
    }
    let inv = t
        .inverse()
        .ok_or_else(|| Error::param(format!("transform {t:?} is not invertible")))?;

    let rows: Vec<Option<(usize, usize)>> = (0..dst_h)
        .map(|y| valid_columns(&inv, y, src_w, src_h, dst_w))
        .collect();

    let mut best: Option<Rect> = None;
    for y0 in 0..dst_h {
        let Some((mut left, mut right)) = rows[y0] else {
            continue;
        };
        for (y1, row) in rows.iter().enumerate().skip(y0) {
            let Some((l, r)) = *row else { break };
            left = left.max(l);
            right = right.min(r);
            if left > right {
                break;
            }
            let cand = Rect::new(left, y0, right - left + 1, y1 - y0 + 1);
            let better = match best {
                None => true,
                Some(b) => {
                    (
                        cand.area(),
                        std::cmp::Reverse(cand.x),
                        std::cmp::Reverse(cand.y),
                    ) > (b.area(), std::cmp::Reverse(b.x), std::cmp::Reverse(b.y))
                }
            };
            if better {
                best = Some(cand);
            }
        }
    }
    best.ok_or_else(|| Error::param("warped source does not overlap the destination frame"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::{crop, Channels};
    use std::f64::consts::FRAC_1_SQRT_2;

    fn texture(w: usize, h: usize) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, Channels::Rgb, |x, y| {
            let (xf, yf) = (x as f64, y as f64);
            let v = 128.0
                + 60.0 * (xf / 7.0).sin() * (yf / 11.0).cos()
                + 40.0 * ((xf + yf) / 13.0).sin();
            [
                v as u8,
                (255.0 - v) as u8,
                ((xf * 0.7 + yf * 0.3) as usize % 256) as u8,
            ]
        })
        .unwrap()
    }

    #[test]
    fn identity_warp_is_exact() {
        let img = texture(40, 30);
        assert_eq!(
            warp_affine(&img, &AffineTransform::IDENTITY, 40, 30).unwrap(),
            img
        );
    }

    #[test]
    fn translation_shifts_and_blackens() {
        let img = texture(50, 20);
        let out = warp_affine(&img, &AffineTransform::translation(10.0, 0.0), 50, 20).unwrap();
        for y in 0..20 {
            for x in 0..10 {
                assert_eq!(out.pixel(x, y), &[0, 0, 0]);
            }
            for x in 10..50 {
                assert_eq!(out.pixel(x, y), img.pixel(x - 10, y));
            }
        }
    }

    #[test]
    fn singular_transform_is_rejected() {
        let img = texture(8, 8);
        let t = AffineTransform::new(1.0, 1.0, 0.0, 1.0, 1.0, 0.0);
        assert!(matches!(
            warp_affine(&img, &t, 8, 8),
            Err(Error::Parameter(_))
        ));
        assert!(compute_common_crop(&t, 8, 8, 8, 8).is_err());
    }

    #[test]
    fn warp_round_trip_psnr() {
        let img = texture(160, 120);
        let t = AffineTransform::new(1.03, 0.04, 6.0, -0.03, 0.97, -4.0);
        let there = warp_affine(&img, &t, 160, 120).unwrap();
        let back = warp_affine(&there, &t.inverse().unwrap(), 160, 120).unwrap();
        let interior = Rect::new(20, 20, 120, 80);
        let (a, b) = (
            crop(&img, interior).unwrap(),
            crop(&back, interior).unwrap(),
        );
        let mse = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&p, &q)| (f64::from(p) - f64::from(q)).powi(2))
            .sum::<f64>()
            / a.data().len() as f64;
        let psnr = 10.0 * (255.0f64.powi(2) / mse).log10();
        assert!(psnr > 30.0, "psnr {psnr}");
    }

    #[test]
    fn crop_examples() {
        assert_eq!(
            compute_common_crop(&AffineTransform::IDENTITY, 100, 100, 100, 100).unwrap(),
            Rect::new(0, 0, 100, 100)
        );
        assert_eq!(
            compute_common_crop(&AffineTransform::translation(10.0, 0.0), 100, 100, 100, 100)
                .unwrap(),
            Rect::new(10, 0, 90, 100)
        );
        let half = AffineTransform::new(0.5, 0.0, 0.0, 0.0, 0.5, 0.0);
        assert_eq!(
            compute_common_crop(&half, 100, 100, 100, 100).unwrap(),
            Rect::new(0, 0, 50, 50)
        );
    }

    #[test]
    fn disjoint_footprint_is_an_error() {
        let t = AffineTransform::translation(500.0, 0.0);
        assert!(compute_common_crop(&t, 100, 100, 100, 100).is_err());
    }

    #[test]
    fn crop_never_contains_black_border() {
        let img = ImageBuffer::filled(120, 90, Channels::Gray, 200).unwrap();
        for (i, t) in [
            AffineTransform::new(0.98, 0.05, 7.3, -0.04, 1.02, -5.1),
            AffineTransform::new(1.1, -0.02, -12.0, 0.03, 0.92, 9.5),
            AffineTransform::new(
                FRAC_1_SQRT_2,
                -FRAC_1_SQRT_2,
                60.0,
                FRAC_1_SQRT_2,
                FRAC_1_SQRT_2,
                -20.0,
            ),
        ]
        .iter()
        .enumerate()
        {
            let warped = warp_affine(&img, t, 110, 100).unwrap();
            let r = compute_common_crop(t, 120, 90, 110, 100).unwrap();
            let inside = crop(&warped, r).unwrap();
            assert!(inside.data().iter().all(|&v| v == 200), "case {i}: {r:?}");
        }
    }

    #[test]
    fn crop_is_maximal_against_brute_force() {
        let t = AffineTransform::new(0.95, 0.06, 3.0, -0.05, 1.01, 2.5);
        let (sw, sh, dw, dh) = (40, 30, 36, 34);
        let inv = t.inverse().unwrap();
        let valid = |x: usize, y: usize| {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            source_inside(sx, sy, sw, sh)
        };
        let mut best = 0;
        for y0 in 0..dh {
            for y1 in y0..dh {
                for x0 in 0..dw {
                    for x1 in x0..dw {
                        let area = (x1 - x0 + 1) * (y1 - y0 + 1);
                        if area <= best {
                            continue;
                        }
                        if (y0..=y1).all(|y| (x0..=x1).all(|x| valid(x, y))) {
                            best = area;
                        }
                    }
                }
            }
        }
        assert_eq!(
            compute_common_crop(&t, sw, sh, dw, dh).unwrap().area(),
            best
        );
    }
}
