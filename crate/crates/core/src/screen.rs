//! Screenshots: synthetic rendering, pixel-exact cropping, PNG I/O and the
//! patch-grid visual token model used for compression accounting.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::rng::mix64;

#[derive(Debug, thiserror::Error)]
pub enum ScreenError {
    #[error("screen dimensions must be positive, got {0}x{1}")]
    ZeroDimension(u32, u32),
    #[error("pixel buffer holds {got} bytes, expected {expected}")]
    BufferSize { got: usize, expected: usize },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("png decode error on {path}: {source}")]
    PngDecode { path: String, source: png::DecodingError },
    #[error("png encode error on {path}: {source}")]
    PngEncode { path: String, source: png::EncodingError },
    #[error("unsupported png layout in {0}: need 8-bit RGB or RGBA")]
    UnsupportedPng(String),
}

/// Row-major 8-bit RGB raster. `origin` records which part of the original
/// frame the raster covers.
#[derive(Debug, Clone, PartialEq)]
pub struct Screenshot {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
    origin: BBox,
}

impl Screenshot {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, ScreenError> {
        if width == 0 || height == 0 {
            return Err(ScreenError::ZeroDimension(width, height));
        }
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(ScreenError::BufferSize {
                got: pixels.len(),
                expected,
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
            origin: BBox::FULL,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn origin(&self) -> BBox {
        self.origin
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn load_png(path: &Path) -> Result<Self, ScreenError> {
        let name = path.display().to_string();
        let file = File::open(path).map_err(|source| ScreenError::Io {
            path: name.clone(),
            source,
        })?;
        let decoder = png::Decoder::new(BufReader::new(file));
        let mut reader = decoder.read_info().map_err(|source| ScreenError::PngDecode {
            path: name.clone(),
            source,
        })?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| ScreenError::UnsupportedPng(name.clone()))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(|source| ScreenError::PngDecode {
            path: name.clone(),
            source,
        })?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(ScreenError::UnsupportedPng(name));
        }
        buf.truncate(info.buffer_size());
        let pixels = match info.color_type {
            png::ColorType::Rgb => buf,
            png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|px| [px[0], px[1], px[2]]).collect(),
            _ => return Err(ScreenError::UnsupportedPng(name)),
        };
        Self::new(info.width, info.height, pixels)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ScreenError> {
        let name = path.display().to_string();
        let file = File::create(path).map_err(|source| ScreenError::Io {
            path: name.clone(),
            source,
        })?;
        let mut encoder = png::Encoder::new(BufWriter::new(file), self.width, self.height);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let encode_err = |source| ScreenError::PngEncode {
            path: name.clone(),
            source,
        };
        let mut writer = encoder.write_header().map_err(encode_err)?;
        writer.write_image_data(&self.pixels).map_err(encode_err)?;
        writer.finish().map_err(encode_err)
    }
}

const TARGET_RGB: [u8; 3] = [255, 64, 0];
const BLOCK_SHIFT: u32 = 3;

/// Deterministic block-noise texture with a solid orange rectangle at `target`.
pub fn render_synthetic(seed: u64, width: u32, height: u32, target: Option<BBox>) -> Result<Screenshot, ScreenError> {
    if width == 0 || height == 0 {
        return Err(ScreenError::ZeroDimension(width, height));
    }
    let (w, h) = (width as usize, height as usize);
    let blocks_x = (w >> BLOCK_SHIFT) + 1;
    let key = mix64(seed);
    let rect = target.map(|b| {
        let fx = |v: f64, n: usize, ceil: bool| {
            let p = v * n as f64;
            (if ceil { p.ceil() } else { p.floor() } as usize).min(n)
        };
        (
            fx(b.x1, w, false),
            fx(b.y1, h, false),
            fx(b.x2, w, true),
            fx(b.y2, h, true),
        )
    });

    let mut pixels = vec![0u8; w * h * 3];
    let mut row_colors = vec![[0u8; 3]; blocks_x];
    for (y, row) in pixels.chunks_exact_mut(w * 3).enumerate() {
        if y & ((1 << BLOCK_SHIFT) - 1) == 0 {
            let by = (y >> BLOCK_SHIFT) as u64;
            for (bx, c) in row_colors.iter_mut().enumerate() {
                let v = mix64(key ^ (by << 32) ^ bx as u64);
                let base = 60 + (v % 120) as u8;
                *c = [
                    base,
                    base.wrapping_add((v >> 8) as u8 % 16),
                    base.wrapping_add((v >> 16) as u8 % 16),
                ];
            }
        }
        for (x, px) in row.chunks_exact_mut(3).enumerate() {
            px.copy_from_slice(&row_colors[x >> BLOCK_SHIFT]);
        }
        if let Some((x1, y1, x2, y2)) = rect {
            if y >= y1 && y < y2 {
                for px in row[x1 * 3..x2 * 3].chunks_exact_mut(3) {
                    px.copy_from_slice(&TARGET_RGB);
                }
            }
        }
    }
    Screenshot::new(width, height, pixels)
}

/// Exact sub-rectangle of `s` covering `roi` (relative to `s`'s own frame).
///
/// Output sides are `round(roi side × input side)`, at least one pixel.
pub fn crop(s: &Screenshot, roi: &BBox) -> Screenshot {
    let axis = |lo: f64, hi: f64, n: u32| -> (u32, u32) {
        let len = (((hi - lo) * f64::from(n)).round() as u32).clamp(1, n);
        let start = ((lo * f64::from(n)).round() as u32).min(n - len);
        (start, len)
    };
    let (left, cw) = axis(roi.x1, roi.x2, s.width);
    let (top, ch) = axis(roi.y1, roi.y2, s.height);
    let mut pixels = Vec::with_capacity(cw as usize * ch as usize * 3);
    let stride = s.width as usize * 3;
    for y in top..top + ch {
        let start = y as usize * stride + left as usize * 3;
        pixels.extend_from_slice(&s.pixels[start..start + cw as usize * 3]);
    }
    Screenshot {
        width: cw,
        height: ch,
        pixels,
        origin: s.origin.compose(roi),
    }
}

/// Patch-grid visual token model: one token per `patch_px·merge` square cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenModel {
    pub patch_px: u32,
    pub merge: u32,
}

impl Default for TokenModel {
    fn default() -> Self {
        Self { patch_px: 28, merge: 2 }
    }
}

impl TokenModel {
    pub fn cell(&self) -> u32 {
        self.patch_px.max(1) * self.merge.max(1)
    }
}

pub fn token_count(width: u32, height: u32, tm: &TokenModel) -> u64 {
    let cell = tm.cell();
    u64::from(width.div_ceil(cell)) * u64::from(height.div_ceil(cell))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn digest(s: &Screenshot) -> u64 {
        s.pixels().chunks(8).fold(0, |h, c| {
            let mut v = [0u8; 8];
            v[..c.len()].copy_from_slice(c);
            mix64(h ^ u64::from_le_bytes(v))
        })
    }

    #[test]
    fn render_is_deterministic_per_seed() {
        let target = BBox::new(0.4, 0.4, 0.6, 0.6).ok();
        let a = render_synthetic(7, 100, 100, target).unwrap();
        let b = render_synthetic(7, 100, 100, target).unwrap();
        let c = render_synthetic(8, 100, 100, target).unwrap();
        assert_eq!(a, b);
        assert_ne!(digest(&a), digest(&c));
        assert_eq!(a.pixel(50, 50), TARGET_RGB);
        assert_ne!(a.pixel(5, 5), TARGET_RGB);
    }

    #[test]
    fn full_frame_target_fills_everything() {
        let s = render_synthetic(3, 33, 17, Some(BBox::FULL)).unwrap();
        assert!(s.pixels().chunks(3).all(|px| px == TARGET_RGB));
    }

    #[test]
    fn crop_index_arithmetic() {
        let s = render_synthetic(11, 1000, 2000, None).unwrap();
        let roi = BBox::new(0.1, 0.2, 0.5, 0.6).unwrap();
        let c = crop(&s, &roi);
        assert_eq!(c.dims(), (400, 800));
        for (x, y) in [(0, 0), (399, 799), (17, 311)] {
            assert_eq!(c.pixel(x, y), s.pixel(100 + x, 400 + y));
        }
        assert_eq!(c.origin(), roi);
    }

    #[test]
    fn crop_identity_and_degenerate() {
        let s = render_synthetic(1, 64, 48, None).unwrap();
        assert_eq!(crop(&s, &BBox::FULL), s);
        let thin = BBox::new(0.5, 0.0, 0.5, 1.0).unwrap();
        let c = crop(&s, &thin);
        assert_eq!(c.dims(), (1, 48));
    }

    #[test]
    fn token_count_examples() {
        let tm = TokenModel::default();
        assert_eq!(token_count(1120, 2240, &tm), 800);
        assert_eq!(token_count(56, 56, &tm), 1);
        assert_eq!(token_count(400, 800, &tm), 120);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.png");
        let s = render_synthetic(5, 40, 30, BBox::new(0.1, 0.1, 0.3, 0.9).ok()).unwrap();
        s.save_png(&path).unwrap();
        assert_eq!(Screenshot::load_png(&path).unwrap(), s);
    }

    #[test]
    fn bad_buffers_rejected() {
        assert!(Screenshot::new(2, 2, vec![0; 11]).is_err());
        assert!(Screenshot::new(0, 2, vec![]).is_err());
    }

    fn roi() -> impl Strategy<Value = BBox> {
        (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0)
            .prop_map(|(a, b, c, d)| BBox::new(a.min(b), c.min(d), a.max(b), c.max(d)).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn crop_never_increases_tokens(w in 1u32..400, h in 1u32..400, r in roi()) {
            let tm = TokenModel::default();
            let s = render_synthetic(9, w, h, None).unwrap();
            let c = crop(&s, &r);
            prop_assert!(token_count(c.width(), c.height(), &tm) <= token_count(w, h, &tm));
        }

        #[test]
        fn crop_composes(a in roi(), b in roi()) {
            let s = render_synthetic(2, 240, 160, None).unwrap();
            let twice = crop(&crop(&s, &a), &b);
            let once = crop(&s, &a.compose(&b));
            let o1 = twice.origin();
            let o2 = once.origin();
            prop_assert!((o1.x1 - o2.x1).abs() < 1e-12 && (o1.y2 - o2.y2).abs() < 1e-12);
            prop_assert!(twice.width().abs_diff(once.width()) <= 1);
            prop_assert!(twice.height().abs_diff(once.height()) <= 1);
        }
    }
}
