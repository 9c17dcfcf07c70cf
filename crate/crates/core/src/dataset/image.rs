use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};

/// Pixels darker than this count as ink.
pub const INK_THRESHOLD: u8 = 128;
pub const BACKGROUND: u8 = 255;
pub const INK: u8 = 0;

/// Single-channel raster drawing. `0` is ink and `255` is paper.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DrawingImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub patent_id: String,
    pub view_index: u32,
}

impl DrawingImage {
    pub fn new(
        width: usize,
        height: usize,
        pixels: Vec<u8>,
        patent_id: impl Into<String>,
        view_index: u32,
    ) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::invalid(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
            patent_id: patent_id.into(),
            view_index,
        })
    }

    /// All-background image without provenance.
    pub fn blank(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![BACKGROUND; width * height],
            patent_id: String::new(),
            view_index: 0,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    /// Same provenance, new raster.
    pub(crate) fn with_pixels(&self, width: usize, height: usize, pixels: Vec<u8>) -> Self {
        debug_assert_eq!(pixels.len(), width * height);
        Self {
            width,
            height,
            pixels,
            patent_id: self.patent_id.clone(),
            view_index: self.view_index,
        }
    }

    pub fn ink_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p < INK_THRESHOLD).count()
    }

    pub fn ink_fraction(&self) -> f64 {
        if self.pixels.is_empty() {
            return 0.0;
        }
        self.ink_count() as f64 / self.pixels.len() as f64
    }

    /// Fraction of pixels brighter than 200.
    pub fn background_fraction(&self) -> f64 {
        if self.pixels.is_empty() {
            return 1.0;
        }
        self.pixels.iter().filter(|&&p| p > 200).count() as f64 / self.pixels.len() as f64
    }

    pub fn load(path: &Path, patent_id: impl Into<String>, view_index: u32) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (width, height, pixels) = decode_gray(&bytes).map_err(|reason| Error::Image {
            path: path.to_path_buf(),
            reason,
        })?;
        Self::new(width, height, pixels, patent_id, view_index)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = encode_png(self.width, self.height, &self.pixels).map_err(|reason| {
            Error::Image {
                path: path.to_path_buf(),
                reason,
            }
        })?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// 8-bit grayscale PNG bytes.
pub fn encode_png(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>, String> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| e.to_string())?;
        writer.write_image_data(pixels).map_err(|e| e.to_string())?;
    }
    Ok(out)
}

/// Decodes PNG (any color type, converted to luma) or binary PGM (`P5`).
pub fn decode_gray(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), String> {
    if bytes.starts_with(b"P5") {
        decode_pgm(bytes)
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(bytes)
    } else {
        Err("unrecognized image format (expected PNG or binary PGM)".into())
    }
}

fn decode_png(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), String> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| e.to_string())?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| "image too large".to_string())?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err("indexed PNG was not expanded".into()),
    };
    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        let line = &buf[y * info.line_size..y * info.line_size + w * channels];
        for px in line.chunks_exact(channels) {
            let (luma, alpha) = match channels {
                1 => (px[0] as f64, 255.0),
                2 => (px[0] as f64, px[1] as f64),
                3 => (luma(px), 255.0),
                _ => (luma(px), px[3] as f64),
            };
            // Transparent regions composite onto white paper.
            let v = luma * alpha / 255.0 + 255.0 * (1.0 - alpha / 255.0);
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok((w, h, pixels))
}

fn luma(px: &[u8]) -> f64 {
    0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64
}

fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), String> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated PGM header".into()),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| "malformed PGM header".to_string())?;
    }
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported PGM maxval {maxval}"));
    }
    pos += 1; // single whitespace after maxval
    let data = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| "truncated PGM data".to_string())?;
    let pixels = data
        .iter()
        .map(|&v| ((v as usize * 255 + maxval / 2) / maxval) as u8)
        .collect();
    Ok((w, h, pixels))
}
