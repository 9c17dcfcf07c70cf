//! Scale-free augmentation for line drawings.
//!
//! Drawings share a fixed stroke width, so the default policy only flips,
//! translates and crops: no transform ever resamples the raster. Random
//! resized crop and random rotation exist solely as opt-in ablations and are
//! reachable only through an [`AugmentPolicy`] that enables them.
//!
//! The flip, translate, crop order and its default magnitudes are a
//! reconstruction rather than a published recipe.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DrawingImage, BACKGROUND};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    /// Train-time crop side. The crop is never resized back up.
    pub crop_size: usize,
    /// Eval-time canvas side (center crop or pad, no resize).
    pub eval_size: usize,
    pub translate_max: usize,
    pub hflip_prob: f64,
    pub pad_value: u8,
    pub ablation_random_resized_crop: bool,
    pub resized_crop_scale: (f64, f64),
    pub resized_crop_ratio: (f64, f64),
    pub ablation_random_rotation_deg: Option<f64>,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            crop_size: 224,
            eval_size: 256,
            translate_max: 16,
            hflip_prob: 0.5,
            pad_value: BACKGROUND,
            ablation_random_resized_crop: false,
            resized_crop_scale: (0.08, 1.0),
            resized_crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            ablation_random_rotation_deg: None,
        }
    }
}

impl AugmentPolicy {
    /// Preset for 64x64 drawings.
    pub fn toy() -> Self {
        Self {
            crop_size: 56,
            eval_size: 64,
            translate_max: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || self.eval_size == 0 {
            return Err(Error::invalid("crop and eval sizes must be positive"));
        }
        if self.crop_size > self.eval_size {
            return Err(Error::invalid(format!(
                "crop size {} exceeds eval canvas {}",
                self.crop_size, self.eval_size
            )));
        }
        if self.translate_max >= self.eval_size {
            return Err(Error::invalid("translate_max must be smaller than the canvas"));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::invalid("hflip_prob must be in [0, 1]"));
        }
        let (s0, s1) = self.resized_crop_scale;
        let (r0, r1) = self.resized_crop_ratio;
        if !(s0 > 0.0 && s0 <= s1 && s1 <= 1.0) || !(r0 > 0.0 && r0 <= r1) {
            return Err(Error::invalid("bad resized-crop scale/ratio range"));
        }
        if let Some(deg) = self.ablation_random_rotation_deg {
            if !(deg >= 0.0 && deg.is_finite()) {
                return Err(Error::invalid("rotation range must be a finite nonnegative angle"));
            }
        }
        Ok(())
    }

    /// True when no enabled transform rescales content.
    pub fn is_scale_free(&self) -> bool {
        !self.ablation_random_resized_crop
    }

    pub fn random_resized_crop(&self) -> Result<RandomResizedCrop> {
        if !self.ablation_random_resized_crop {
            return Err(Error::invalid(
                "random resized crop requires ablation_random_resized_crop = true",
            ));
        }
        Ok(RandomResizedCrop {
            out_size: self.crop_size,
            scale: self.resized_crop_scale,
            ratio: self.resized_crop_ratio,
        })
    }

    pub fn random_rotation(&self) -> Result<RandomRotation> {
        match self.ablation_random_rotation_deg {
            Some(max_deg) => Ok(RandomRotation {
                max_deg,
                pad_value: self.pad_value,
            }),
            None => Err(Error::invalid(
                "random rotation requires ablation_random_rotation_deg to be set",
            )),
        }
    }
}

/// Uniform crop of `crop_size x crop_size`, kept at native resolution.
pub fn random_crop_no_resize<R: Rng + ?Sized>(
    img: &DrawingImage,
    crop_size: usize,
    rng: &mut R,
) -> Result<DrawingImage> {
    if crop_size == 0 || crop_size > img.width || crop_size > img.height {
        return Err(Error::invalid(format!(
            "crop {crop_size} does not fit {}x{} image",
            img.width, img.height
        )));
    }
    let x0 = rng.random_range(0..=img.width - crop_size);
    let y0 = rng.random_range(0..=img.height - crop_size);
    Ok(crop(img, x0, y0, crop_size, crop_size))
}

pub fn crop(img: &DrawingImage, x0: usize, y0: usize, w: usize, h: usize) -> DrawingImage {
    let mut px = Vec::with_capacity(w * h);
    for y in y0..y0 + h {
        px.extend_from_slice(&img.pixels[y * img.width + x0..y * img.width + x0 + w]);
    }
    img.with_pixels(w, h, px)
}

/// Shifts content by `(dx, dy)`; vacated pixels take `pad_value`.
pub fn translate(img: &DrawingImage, dx: isize, dy: isize, pad_value: u8) -> DrawingImage {
    let (w, h) = (img.width as isize, img.height as isize);
    let mut px = vec![pad_value; img.pixels.len()];
    for y in 0..h {
        let sy = y - dy;
        if sy < 0 || sy >= h {
            continue;
        }
        for x in 0..w {
            let sx = x - dx;
            if sx >= 0 && sx < w {
                px[(y * w + x) as usize] = img.pixels[(sy * w + sx) as usize];
            }
        }
    }
    img.with_pixels(img.width, img.height, px)
}

pub fn random_translate_pad<R: Rng + ?Sized>(
    img: &DrawingImage,
    translate_max: usize,
    pad_value: u8,
    rng: &mut R,
) -> Result<DrawingImage> {
    if translate_max >= img.width.min(img.height) {
        return Err(Error::invalid(format!(
            "translate_max {translate_max} must be below image size {}x{}",
            img.width, img.height
        )));
    }
    let t = translate_max as i64;
    let dx = rng.random_range(-t..=t) as isize;
    let dy = rng.random_range(-t..=t) as isize;
    Ok(translate(img, dx, dy, pad_value))
}

/// Mirrors columns: `(x, y) -> (width - 1 - x, y)`.
pub fn flip(img: &DrawingImage) -> DrawingImage {
    let mut px = Vec::with_capacity(img.pixels.len());
    for row in img.pixels.chunks_exact(img.width.max(1)) {
        px.extend(row.iter().rev());
    }
    img.with_pixels(img.width, img.height, px)
}

pub fn horizontal_flip<R: Rng + ?Sized>(
    img: &DrawingImage,
    prob: f64,
    rng: &mut R,
) -> Result<DrawingImage> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::invalid(format!("flip probability {prob} outside [0, 1]")));
    }
    // Always draw so the rng stream does not depend on `prob`.
    let u: f64 = rng.random();
    Ok(if u < prob { flip(img) } else { img.clone() })
}

/// Center crop where larger than `size`, symmetric pad where smaller.
pub fn center_fit(img: &DrawingImage, size: usize, pad_value: u8) -> DrawingImage {
    if img.width == size && img.height == size {
        return img.clone();
    }
    let mut px = vec![pad_value; size * size];
    // Offsets map source coordinates to destination coordinates.
    let off = |src: usize| -> isize { (size as isize - src as isize).div_euclid(2) };
    let (ox, oy) = (off(img.width), off(img.height));
    for y in 0..size as isize {
        let sy = y - oy;
        if sy < 0 || sy >= img.height as isize {
            continue;
        }
        for x in 0..size as isize {
            let sx = x - ox;
            if sx >= 0 && sx < img.width as isize {
                px[(y as usize) * size + x as usize] = img.pixels[sy as usize * img.width + sx as usize];
            }
        }
    }
    img.with_pixels(size, size, px)
}

/// Inverted-grayscale `[1, H, W]` tensor: ink near 1, paper at 0.
pub fn normalize(img: &DrawingImage) -> Tensor {
    let data = img
        .pixels
        .iter()
        .map(|&p| (255.0 - p as f32) / 255.0)
        .collect();
    Tensor::new([1, img.height, img.width], data).expect("pixel count matches dimensions")
}

/// Crop of a random scale/aspect sub-window, resampled to `out_size`.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomResizedCrop {
    out_size: usize,
    scale: (f64, f64),
    ratio: (f64, f64),
}

impl RandomResizedCrop {
    pub fn out_size(&self) -> usize {
        self.out_size
    }

    /// Picks the window `(x0, y0, w, h)` following the usual ten-attempt rule.
    pub fn sample_window<R: Rng + ?Sized>(
        &self,
        width: usize,
        height: usize,
        rng: &mut R,
    ) -> (usize, usize, usize, usize) {
        let area = (width * height) as f64;
        let (lr0, lr1) = (self.ratio.0.ln(), self.ratio.1.ln());
        for _ in 0..10 {
            let target = area * uniform(rng, self.scale.0, self.scale.1);
            let aspect = uniform(rng, lr0, lr1).exp();
            let w = (target * aspect).sqrt().round() as usize;
            let h = (target / aspect).sqrt().round() as usize;
            if w > 0 && h > 0 && w <= width && h <= height {
                let x0 = rng.random_range(0..=width - w);
                let y0 = rng.random_range(0..=height - h);
                return (x0, y0, w, h);
            }
        }
        // Fallback: largest centered window within the ratio bounds.
        let in_ratio = width as f64 / height as f64;
        let (w, h) = if in_ratio < self.ratio.0 {
            (width, ((width as f64 / self.ratio.0).round() as usize).min(height))
        } else if in_ratio > self.ratio.1 {
            (((height as f64 * self.ratio.1).round() as usize).min(width), height)
        } else {
            (width, height)
        };
        ((width - w) / 2, (height - h) / 2, w, h)
    }

    pub fn apply<R: Rng + ?Sized>(&self, img: &DrawingImage, rng: &mut R) -> DrawingImage {
        let (x0, y0, w, h) = self.sample_window(img.width, img.height, rng);
        resize_bilinear(&crop(img, x0, y0, w, h), self.out_size, self.out_size)
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Half-pixel-centered bilinear resampling.
pub fn resize_bilinear(img: &DrawingImage, out_w: usize, out_h: usize) -> DrawingImage {
    let sx = img.width as f64 / out_w as f64;
    let sy = img.height as f64 / out_h as f64;
    let mut px = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let ty = fy - y0 as f64;
        for x in 0..out_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let tx = fx - x0 as f64;
            let g = |xx: usize, yy: usize| img.pixels[yy * img.width + xx] as f64;
            let top = g(x0, y0) * (1.0 - tx) + g(x1, y0) * tx;
            let bot = g(x0, y1) * (1.0 - tx) + g(x1, y1) * tx;
            px.push((top * (1.0 - ty) + bot * ty).round().clamp(0.0, 255.0) as u8);
        }
    }
    img.with_pixels(out_w, out_h, px)
}

/// Rotation about the image center by a uniform angle in `[-max_deg, max_deg]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomRotation {
    max_deg: f64,
    pad_value: u8,
}

impl RandomRotation {
    pub fn apply<R: Rng + ?Sized>(&self, img: &DrawingImage, rng: &mut R) -> DrawingImage {
        let deg = uniform(rng, -self.max_deg, self.max_deg);
        self.rotate_by(img, deg)
    }

    /// Nearest-neighbour rotation. At +90 degrees `(x, y)` lands on
    /// `(width - 1 - y, x)` for square images.
    pub fn rotate_by(&self, img: &DrawingImage, deg: f64) -> DrawingImage {
        let (s, c) = deg.to_radians().sin_cos();
        let cx = (img.width as f64 - 1.0) / 2.0;
        let cy = (img.height as f64 - 1.0) / 2.0;
        let mut px = vec![self.pad_value; img.pixels.len()];
        for y in 0..img.height {
            for x in 0..img.width {
                let (u, v) = (x as f64 - cx, y as f64 - cy);
                // inverse rotation of the destination coordinate
                let su = u * c + v * s;
                let sv = -u * s + v * c;
                let sx = (su + cx).round();
                let sy = (sv + cy).round();
                if sx >= 0.0 && sy >= 0.0 && (sx as usize) < img.width && (sy as usize) < img.height {
                    px[y * img.width + x] = img.pixels[sy as usize * img.width + sx as usize];
                }
            }
        }
        img.with_pixels(img.width, img.height, px)
    }
}

/// Full augmentation to a network input.
///
/// Both modes first place the drawing on an `eval_size` canvas (center
/// crop or pad). Train mode then applies flip, translation, the optional
/// rotation ablation, and finally the crop (or the resized-crop ablation).
pub fn apply_policy<R: Rng + ?Sized>(
    img: &DrawingImage,
    policy: &AugmentPolicy,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor> {
    policy.validate()?;
    let canvas = center_fit(img, policy.eval_size, policy.pad_value);
    if mode == Mode::Eval {
        return Ok(normalize(&canvas));
    }
    let mut cur = horizontal_flip(&canvas, policy.hflip_prob, rng)?;
    if policy.translate_max > 0 {
        cur = random_translate_pad(&cur, policy.translate_max, policy.pad_value, rng)?;
    }
    if policy.ablation_random_rotation_deg.is_some() {
        cur = policy.random_rotation()?.apply(&cur, rng);
    }
    let out = if policy.ablation_random_resized_crop {
        policy.random_resized_crop()?.apply(&cur, rng)
    } else {
        random_crop_no_resize(&cur, policy.crop_size, rng)?
    };
    Ok(normalize(&out))
}
