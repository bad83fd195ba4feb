//! Raster images, PNG/JPEG codecs and the small set of pixel operations the
//! rest of the crate builds on.
//!
//! Images are 8-bit, row-major and channel-interleaved, with either one
//! (grayscale) or three (RGB) channels.

use std::path::Path;

use image::{DynamicImage, ImageFormat};
use jpeg_encoder::{ColorType, Encoder, SamplingFactor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Chroma subsampling used whenever this crate writes a JPEG.
pub const JPEG_SAMPLING: &str = "4:2:0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channels {
    Gray = 1,
    Rgb = 3,
}

impl Channels {
    pub fn count(self) -> usize {
        self as usize
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: Channels,
    data: Vec<u8>,
}

impl std::fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImageBuffer")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: Channels, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::param(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        let expected = width * height * channels.count();
        if data.len() != expected {
            return Err(Error::param(format!(
                "buffer holds {} bytes, {width}x{height}x{} needs {expected}",
                data.len(),
                channels.count()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Image with every sample set to `value`.
    pub fn filled(width: usize, height: usize, channels: Channels, value: u8) -> Result<Self> {
        Self::new(
            width,
            height,
            channels,
            vec![value; width * height * channels.count()],
        )
    }

    /// Builds an image by evaluating `f(x, y)` for every pixel.
    pub fn from_fn<F>(width: usize, height: usize, channels: Channels, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, usize) -> [u8; 3],
    {
        let c = channels.count();
        let mut data = Vec::with_capacity(width * height * c);
        for y in 0..height {
            for x in 0..width {
                let px = f(x, y);
                data.extend_from_slice(&px[..c]);
            }
        }
        Self::new(width, height, channels, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> Channels {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn full_rect(&self) -> Rect {
        Rect::new(0, 0, self.width, self.height)
    }

    /// Samples of the pixel at `(x, y)`.
    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let c = self.channels.count();
        let i = (y * self.width + x) * c;
        &self.data[i..i + c]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [u8] {
        let c = self.channels.count();
        let i = (y * self.width + x) * c;
        &mut self.data[i..i + c]
    }

    /// Single-channel sample; only meaningful for grayscale images.
    #[inline]
    pub fn luma_at(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Copies of the image expanded to three channels.
    pub fn to_rgb(&self) -> ImageBuffer {
        match self.channels {
            Channels::Rgb => self.clone(),
            Channels::Gray => {
                let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
                ImageBuffer {
                    width: self.width,
                    height: self.height,
                    channels: Channels::Rgb,
                    data,
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub const fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn fits_within(&self, width: usize, height: usize) -> bool {
        self.w >= 1
            && self.h >= 1
            && self.x.checked_add(self.w).is_some_and(|r| r <= width)
            && self.y.checked_add(self.h).is_some_and(|b| b <= height)
    }

    /// Rect `inner`, expressed relative to `self`, mapped back into the
    /// coordinates `self` is expressed in.
    pub fn compose(&self, inner: Rect) -> Rect {
        Rect::new(self.x + inner.x, self.y + inner.y, inner.w, inner.h)
    }
}

fn image_format_name(fmt: ImageFormat) -> &'static str {
    match fmt {
        ImageFormat::Png => "PNG",
        ImageFormat::Jpeg => "JPEG",
        _ => "unsupported",
    }
}

/// Decodes a PNG or JPEG stream.
///
/// JPEG always decodes to RGB; PNG keeps grayscale as one channel. Alpha is
/// dropped and 16-bit PNGs are reduced to 8 bits.
pub fn decode_image(bytes: &[u8]) -> Result<ImageBuffer> {
    let format = image::guess_format(bytes).map_err(|e| Error::Decode {
        format: "unknown",
        reason: e.to_string(),
    })?;
    let name = image_format_name(format);
    if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg) {
        return Err(Error::Decode {
            format: name,
            reason: format!("{format:?} is not PNG or JPEG"),
        });
    }
    if format == ImageFormat::Jpeg && !has_end_of_image(bytes) {
        return Err(Error::Decode {
            format: name,
            reason: "truncated stream: no end-of-image marker after scan data".into(),
        });
    }
    let dynamic =
        image::load_from_memory_with_format(bytes, format).map_err(|e| Error::Decode {
            format: name,
            reason: e.to_string(),
        })?;
    let gray = format == ImageFormat::Png
        && matches!(
            dynamic,
            DynamicImage::ImageLuma8(_)
                | DynamicImage::ImageLumaA8(_)
                | DynamicImage::ImageLuma16(_)
                | DynamicImage::ImageLumaA16(_)
        );
    let (w, h) = (dynamic.width() as usize, dynamic.height() as usize);
    if gray {
        ImageBuffer::new(w, h, Channels::Gray, dynamic.into_luma8().into_raw())
    } else {
        ImageBuffer::new(w, h, Channels::Rgb, dynamic.into_rgb8().into_raw())
    }
}

/// The decoder happily pads truncated scans with zeros, so completeness is
/// checked up front: an EOI marker must follow the first SOS marker.
fn has_end_of_image(bytes: &[u8]) -> bool {
    let find = |from: usize, marker: u8| {
        bytes[from.min(bytes.len())..]
            .windows(2)
            .position(|w| w == [0xFF, marker])
            .map(|p| p + from)
    };
    find(0, 0xDA).is_some_and(|sos| find(sos + 2, 0xD9).is_some())
}

pub fn read_image(path: &Path) -> Result<ImageBuffer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

/// Lossless PNG encoding; grayscale images are written as 8-bit luma.
pub fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>> {
    let color = match img.channels {
        Channels::Gray => image::ExtendedColorType::L8,
        Channels::Rgb => image::ExtendedColorType::Rgb8,
    };
    let mut out = Vec::new();
    image::ImageEncoder::write_image(
        image::codecs::png::PngEncoder::new(&mut out),
        &img.data,
        img.width as u32,
        img.height as u32,
        color,
    )
    .map_err(|e| Error::Encode {
        format: "PNG",
        reason: e.to_string(),
    })?;
    Ok(out)
}

pub fn write_png(img: &ImageBuffer, path: &Path) -> Result<()> {
    let bytes = encode_png(img)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Baseline JPEG at the given quality (1..=100) with 4:2:0 chroma.
pub fn encode_jpeg(img: &ImageBuffer, quality: u8) -> Result<Vec<u8>> {
    if !(1..=100).contains(&quality) {
        return Err(Error::param(format!(
            "JPEG quality must be in 1..=100, got {quality}"
        )));
    }
    if img.width > u16::MAX as usize || img.height > u16::MAX as usize {
        return Err(Error::Encode {
            format: "JPEG",
            reason: format!("{}x{} exceeds JPEG limits", img.width, img.height),
        });
    }
    let mut out = Vec::new();
    let mut encoder = Encoder::new(&mut out, quality);
    encoder.set_sampling_factor(SamplingFactor::R_4_2_0);
    let color = match img.channels {
        Channels::Gray => ColorType::Luma,
        Channels::Rgb => ColorType::Rgb,
    };
    encoder
        .encode(&img.data, img.width as u16, img.height as u16, color)
        .map_err(|e| Error::Encode {
            format: "JPEG",
            reason: e.to_string(),
        })?;
    Ok(out)
}

/// BT.601 luma, rounded half-up. Grayscale input is returned unchanged.
pub fn to_grayscale(img: &ImageBuffer) -> ImageBuffer {
    match img.channels {
        Channels::Gray => img.clone(),
        Channels::Rgb => {
            let data = img
                .data
                .chunks_exact(3)
                .map(|p| {
                    let weighted =
                        299 * u32::from(p[0]) + 587 * u32::from(p[1]) + 114 * u32::from(p[2]);
                    ((weighted + 500) / 1000) as u8
                })
                .collect();
            ImageBuffer {
                width: img.width,
                height: img.height,
                channels: Channels::Gray,
                data,
            }
        }
    }
}

pub fn crop(img: &ImageBuffer, r: Rect) -> Result<ImageBuffer> {
    if !r.fits_within(img.width, img.height) {
        return Err(Error::OutOfBounds {
            rect: r,
            width: img.width,
            height: img.height,
        });
    }
    let c = img.channels.count();
    let mut data = Vec::with_capacity(r.w * r.h * c);
    for y in r.y..r.y + r.h {
        let start = (y * img.width + r.x) * c;
        data.extend_from_slice(&img.data[start..start + r.w * c]);
    }
    ImageBuffer::new(r.w, r.h, img.channels, data)
}

/// Encodes at `quality` and decodes again, the way an image would look after
/// a lossy re-save.
pub fn jpeg_reencode(img: &ImageBuffer, quality: u8) -> Result<ImageBuffer> {
    let bytes = encode_jpeg(img, quality)?;
    let decoded = decode_image(&bytes)?;
    Ok(match img.channels {
        Channels::Gray => to_grayscale(&decoded),
        Channels::Rgb => decoded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: usize, h: usize) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, Channels::Rgb, |x, y| {
            [(x * 7) as u8, (y * 13) as u8, ((x + y) * 3) as u8]
        })
        .unwrap()
    }

    #[test]
    fn zero_png_decodes_to_zero_rgb() {
        let img = ImageBuffer::filled(2, 2, Channels::Rgb, 0).unwrap();
        let back = decode_image(&encode_png(&img).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn gray_png_stays_single_channel() {
        let img = ImageBuffer::from_fn(5, 3, Channels::Gray, |x, y| [(x * y) as u8; 3]).unwrap();
        let back = decode_image(&encode_png(&img).unwrap()).unwrap();
        assert_eq!(back.channels(), Channels::Gray);
        assert_eq!(back, img);
    }

    #[test]
    fn truncated_jpeg_is_a_decode_error() {
        let bytes = encode_jpeg(&gradient(64, 64), 90).unwrap();
        let err = decode_image(&bytes[..bytes.len() / 3]).unwrap_err();
        assert!(matches!(err, Error::Decode { format: "JPEG", .. }), "{err}");
    }

    #[test]
    fn garbage_is_a_decode_error() {
        assert!(matches!(
            decode_image(b"definitely not an image"),
            Err(Error::Decode { .. })
        ));
    }

    #[test]
    fn buffer_length_is_validated() {
        assert!(ImageBuffer::new(2, 2, Channels::Rgb, vec![0; 11]).is_err());
        assert!(ImageBuffer::new(0, 2, Channels::Gray, vec![]).is_err());
    }

    #[test]
    fn luma_examples() {
        let img = ImageBuffer::new(
            3,
            1,
            Channels::Rgb,
            vec![255, 255, 255, 0, 0, 0, 100, 200, 50],
        )
        .unwrap();
        assert_eq!(to_grayscale(&img).data(), &[255, 0, 153]);
    }

    #[test]
    fn grayscale_is_idempotent() {
        let g = to_grayscale(&gradient(9, 4));
        assert_eq!(to_grayscale(&g), g);
    }

    #[test]
    fn crop_examples() {
        let img =
            ImageBuffer::from_fn(4, 4, Channels::Gray, |x, y| [(y * 4 + x) as u8; 3]).unwrap();
        assert_eq!(crop(&img, img.full_rect()).unwrap(), img);
        let centre = crop(&img, Rect::new(1, 1, 2, 2)).unwrap();
        assert_eq!(centre.data(), &[5, 6, 9, 10]);
        assert!(matches!(
            crop(&img, Rect::new(3, 3, 2, 2)),
            Err(Error::OutOfBounds { .. })
        ));
    }

    #[test]
    fn jpeg_quality_range() {
        let img = gradient(16, 16);
        assert!(matches!(jpeg_reencode(&img, 0), Err(Error::Parameter(_))));
        assert!(matches!(jpeg_reencode(&img, 101), Err(Error::Parameter(_))));
        let out = jpeg_reencode(&img, 60).unwrap();
        assert_eq!((out.width(), out.height()), (16, 16));
    }

    #[test]
    fn flat_gray_survives_quality_100() {
        let img = ImageBuffer::filled(40, 24, Channels::Rgb, 128).unwrap();
        let out = jpeg_reencode(&img, 100).unwrap();
        let worst = img
            .data()
            .iter()
            .zip(out.data())
            .map(|(&a, &b)| (i16::from(a) - i16::from(b)).abs())
            .max()
            .unwrap();
        assert!(worst <= 2, "max deviation {worst}");
    }

    #[test]
    fn odd_dimensions_survive_jpeg() {
        let out = jpeg_reencode(&gradient(33, 17), 80).unwrap();
        assert_eq!(
            (out.width(), out.height(), out.channels()),
            (33, 17, Channels::Rgb)
        );
    }
}
